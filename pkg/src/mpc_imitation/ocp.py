"""Parametric lane-keeping OCP: multiple-shooting transcription + SQP solver.

The nonlinear program has decision vector w = (x_0..x_N, u_0..u_{N-1}
[, s_1..s_N]), RK4 shooting equalities, stage-wise box constraints and, in
the infeasibility-relaxed formulation, soft lane constraints with an exact
l1 penalty on per-stage slacks.

The solver is SQP with the (diagonal) quadratic cost as Gauss-Newton
Hessian, Levenberg regularization on the primal block, an l1 merit line
search, and a primal-dual active-set method for the QP subproblems (all
inequalities are variable bounds in the nominal formulation, so active
bounds are imposed by pinning rows of a fixed-size KKT system).  Converged
solutions are polished by a few Newton steps on the KKT conditions with the
exact Lagrangian Hessian, which drives the residual to ~1e-12 so that the
downstream implicit differentiation is finite-difference grade.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np

from .track import TrackSpec
from .vehicle import (
    IDX_D,
    IDX_DELTA,
    IDX_PSIDOT,
    IDX_VY,
    NX,
    VehicleParams,
    step_hessians,
    step_jacobians,
    step_rk4,
)


class CostVariant(str, Enum):
    """Which learnable cost shape the MPC uses."""

    D1_STAGE = "d1_stage"        # stage cost W_d (d-dbar)^2 + W_th th^2 + W_dd u^2
    D2_TERMINAL = "d2_terminal"  # stage th^2 + u^2, terminal (d_N - dbar)^2


D1_THETA_NAMES = ("w_d", "w_theta", "w_ddelta", "d_bar")
D2_THETA_NAMES = ("d_bar",)


class InvalidSpecError(ValueError):
    """Malformed OCP description (bounds, horizon, parameters)."""


class InfeasibleStartError(RuntimeError):
    """Initial state outside the lane beyond the relaxation margin."""


class QpSubproblemError(RuntimeError):
    """The active-set QP failed (cycling or singular working set)."""


@dataclass(frozen=True)
class BoxBounds:
    """Symmetric physical limits.  Lane bounds come from the track."""

    delta_max: float = 0.5      # rad
    ddelta_max: float = 0.8     # rad/s
    v_y_max: float = 5.0        # m/s
    psi_dot_max: float = 1.5    # rad/s

    def __post_init__(self):
        for name in self.__dataclass_fields__:
            if getattr(self, name) <= 0:
                raise InvalidSpecError(f"BoxBounds.{name} must be positive")


@dataclass(frozen=True)
class OcpSpec:
    track: TrackSpec
    vehicle: VehicleParams = VehicleParams()
    cost_variant: CostVariant = CostVariant.D1_STAGE
    horizon: int = 20
    dt: float = 0.1
    lane_width: float | None = None     # defaults to track.lane_width
    bounds: BoxBounds = BoxBounds()
    relax_margin: float = 1.0           # m beyond the lane edge still accepted
    lane_penalty: float = 1e4           # exact l1 penalty weight on lane slack

    def __post_init__(self):
        if self.horizon < 2:
            raise InvalidSpecError("horizon must be >= 2")
        if self.dt <= 0:
            raise InvalidSpecError("dt must be positive")
        if self.lane_width is None:
            object.__setattr__(self, "lane_width", self.track.lane_width)
        if self.lane_width <= 0:
            raise InvalidSpecError("lane_width must be positive")
        self.cost_variant  # noqa: B018  -- touch to fail fast on bad enum


@dataclass
class ThetaVector:
    """MPC-facing parameter values for one cost variant.

    d1_stage ordering: (w_d, w_theta, w_ddelta, d_bar); d2_terminal: (d_bar,).
    """

    variant: CostVariant
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float).copy()
        expected = 4 if self.variant == CostVariant.D1_STAGE else 1
        if self.values.shape != (expected,):
            raise InvalidSpecError(
                f"{self.variant.value} expects {expected} parameters, got shape {self.values.shape}"
            )

    @classmethod
    def d1(cls, w_d, w_theta, w_ddelta, d_bar) -> "ThetaVector":
        return cls(CostVariant.D1_STAGE, np.array([w_d, w_theta, w_ddelta, d_bar]))

    @classmethod
    def d2(cls, d_bar) -> "ThetaVector":
        return cls(CostVariant.D2_TERMINAL, np.array([float(d_bar)]))

    @property
    def names(self):
        return D1_THETA_NAMES if self.variant == CostVariant.D1_STAGE else D2_THETA_NAMES

    @property
    def d_bar(self) -> float:
        return float(self.values[-1])

    def validate(self, lane_width: float) -> None:
        if not np.all(np.isfinite(self.values)):
            raise InvalidSpecError("theta contains non-finite entries")
        if self.variant == CostVariant.D1_STAGE and np.any(self.values[:3] <= 0):
            raise InvalidSpecError("cost weights must be strictly positive")
        if abs(self.d_bar) >= lane_width / 2:
            raise InvalidSpecError("|d_bar| must stay strictly inside the lane")


# face kinds, used by diagnostics, warm-start shifting and tests
FACE_D = 0
FACE_DELTA = 1
FACE_VY = 2
FACE_PSIDOT = 3
FACE_U = 4
FACE_SLACK = 5


class NlpInstance:
    """One transcribed MPC instance (structure + evaluation callbacks)."""

    def __init__(self, spec: OcpSpec, s0: np.ndarray, theta: ThetaVector, relaxed: bool):
        self.spec = spec
        self.s0 = np.asarray(s0, dtype=float).copy()
        self.theta = theta
        self.relaxed = relaxed
        N = spec.horizon
        self.N = N
        self.n_slack = N if relaxed else 0
        self.off_u = NX * (N + 1)
        self.off_s = self.off_u + N
        self.nw = self.off_s + self.n_slack
        self.n_eq = NX * (N + 1)
        self._build_inequalities()

    # -- layout helpers ---------------------------------------------------
    def x_index(self, k: int, j: int) -> int:
        return NX * k + j

    def u_index(self, k: int) -> int:
        return self.off_u + k

    def unpack(self, w):
        X = w[: self.off_u].reshape(self.N + 1, NX)
        U = w[self.off_u : self.off_u + self.N]
        S = w[self.off_s :] if self.relaxed else None
        return X, U, S

    def pack(self, X, U, S=None) -> np.ndarray:
        parts = [np.asarray(X, dtype=float).ravel(), np.asarray(U, dtype=float).ravel()]
        if self.relaxed:
            parts.append(np.zeros(self.N) if S is None else np.asarray(S, dtype=float).ravel())
        return np.concatenate(parts)

    # -- inequalities ------------------------------------------------------
    def _build_inequalities(self):
        spec = self.spec
        half = spec.lane_width / 2
        b = spec.bounds
        face_var, face_upper, face_bound, face_kind = [], [], [], []
        state_faces = [
            (IDX_DELTA, b.delta_max, FACE_DELTA),
            (IDX_VY, b.v_y_max, FACE_VY),
            (IDX_PSIDOT, b.psi_dot_max, FACE_PSIDOT),
        ]
        if not self.relaxed:
            state_faces.insert(0, (IDX_D, half, FACE_D))
        for k in range(1, self.N + 1):
            for j, bound, kind in state_faces:
                v = self.x_index(k, j)
                face_var += [v, v]
                face_upper += [False, True]
                face_bound += [-bound, bound]
                face_kind += [kind, kind]
        for k in range(self.N):
            v = self.u_index(k)
            face_var += [v, v]
            face_upper += [False, True]
            face_bound += [-b.ddelta_max, b.ddelta_max]
            face_kind += [FACE_U, FACE_U]
        if self.relaxed:
            for k in range(self.N):
                v = self.off_s + k
                face_var.append(v)
                face_upper.append(False)
                face_bound.append(0.0)
                face_kind.append(FACE_SLACK)
        self.face_var = np.array(face_var, dtype=int)
        self.face_upper = np.array(face_upper, dtype=bool)
        self.face_bound = np.array(face_bound, dtype=float)
        self.face_kind = np.array(face_kind, dtype=int)
        self.n_faces = len(face_var)

        # variable bounds implied by the faces
        self.lb = np.full(self.nw, -np.inf)
        self.ub = np.full(self.nw, np.inf)
        lo = ~self.face_upper
        self.lb[self.face_var[lo]] = self.face_bound[lo]
        self.ub[self.face_var[self.face_upper]] = self.face_bound[self.face_upper]

        # general rows: soft lane |d_k| - s_k <= w/2 in the relaxed form
        if self.relaxed:
            G = np.zeros((2 * self.N, self.nw))
            hg = np.full(2 * self.N, half)
            for k in range(1, self.N + 1):
                r = 2 * (k - 1)
                d_col = self.x_index(k, IDX_D)
                s_col = self.off_s + (k - 1)
                G[r, d_col] = 1.0
                G[r, s_col] = -1.0
                G[r + 1, d_col] = -1.0
                G[r + 1, s_col] = -1.0
            self.G = G
            self.h_gen = hg
            self.n_gen = 2 * self.N
        else:
            self.G = None
            self.h_gen = np.zeros(0)
            self.n_gen = 0
        self.n_ineq = self.n_faces + self.n_gen

    def ineq_values(self, w) -> np.ndarray:
        """All inequality constraint values h(w) <= 0, faces then general rows."""
        vals = np.where(
            self.face_upper,
            w[self.face_var] - self.face_bound,
            self.face_bound - w[self.face_var],
        )
        if self.n_gen:
            vals = np.concatenate([vals, self.G @ w - self.h_gen])
        return vals

    def ineq_gradients(self) -> np.ndarray:
        """Dense (n_ineq, nw) constraint gradient matrix."""
        Gh = np.zeros((self.n_ineq, self.nw))
        sign = np.where(self.face_upper, 1.0, -1.0)
        Gh[np.arange(self.n_faces), self.face_var] = sign
        if self.n_gen:
            Gh[self.n_faces :] = self.G
        return Gh

    # -- cost ---------------------------------------------------------------
    def cost_hess_diag(self) -> np.ndarray:
        th = self.theta
        H = np.zeros(self.nw)
        if th.variant == CostVariant.D1_STAGE:
            w_d, w_th, w_dd, _ = th.values
            for k in range(self.N):
                H[self.x_index(k, IDX_D)] = 2.0 * w_d
                H[self.x_index(k, 4)] = 2.0 * w_th
            H[self.off_u : self.off_u + self.N] = 2.0 * w_dd
        else:
            for k in range(self.N):
                H[self.x_index(k, 4)] = 2.0
            H[self.off_u : self.off_u + self.N] = 2.0
            H[self.x_index(self.N, IDX_D)] = 2.0
        return H

    def objective(self, w) -> float:
        X, U, S = self.unpack(w)
        th = self.theta
        if th.variant == CostVariant.D1_STAGE:
            w_d, w_th, w_dd, d_bar = th.values
            val = (
                w_d * np.sum((X[: self.N, IDX_D] - d_bar) ** 2)
                + w_th * np.sum(X[: self.N, 4] ** 2)
                + w_dd * np.sum(U**2)
            )
        else:
            d_bar = th.values[0]
            val = np.sum(X[: self.N, 4] ** 2) + np.sum(U**2) + (X[self.N, IDX_D] - d_bar) ** 2
        if self.relaxed:
            val += self.spec.lane_penalty * np.sum(S)
        return float(val)

    def cost_grad(self, w) -> np.ndarray:
        X, U, _ = self.unpack(w)
        g = np.zeros(self.nw)
        th = self.theta
        if th.variant == CostVariant.D1_STAGE:
            w_d, w_th, w_dd, d_bar = th.values
            for k in range(self.N):
                g[self.x_index(k, IDX_D)] = 2.0 * w_d * (X[k, IDX_D] - d_bar)
                g[self.x_index(k, 4)] = 2.0 * w_th * X[k, 4]
            g[self.off_u : self.off_u + self.N] = 2.0 * w_dd * U
        else:
            d_bar = th.values[0]
            for k in range(self.N):
                g[self.x_index(k, 4)] = 2.0 * X[k, 4]
            g[self.off_u : self.off_u + self.N] = 2.0 * U
            g[self.x_index(self.N, IDX_D)] = 2.0 * (X[self.N, IDX_D] - d_bar)
        if self.relaxed:
            g[self.off_s :] = self.spec.lane_penalty
        return g

    def dgrad_dtheta(self, w) -> np.ndarray:
        """d(cost gradient)/d(theta), shape (nw, n_theta)."""
        X, U, _ = self.unpack(w)
        th = self.theta
        if th.variant == CostVariant.D1_STAGE:
            w_d, _, _, d_bar = th.values
            out = np.zeros((self.nw, 4))
            for k in range(self.N):
                out[self.x_index(k, IDX_D), 0] = 2.0 * (X[k, IDX_D] - d_bar)
                out[self.x_index(k, IDX_D), 3] = -2.0 * w_d
                out[self.x_index(k, 4), 1] = 2.0 * X[k, 4]
            out[self.off_u : self.off_u + self.N, 2] = 2.0 * U
            return out
        out = np.zeros((self.nw, 1))
        out[self.x_index(self.N, IDX_D), 0] = -2.0
        return out

    # -- dynamics -----------------------------------------------------------
    def eq_residual(self, w) -> np.ndarray:
        X, U, _ = self.unpack(w)
        nxt = step_rk4(X[:-1], U, self.spec.vehicle, self.spec.track, self.spec.dt)
        c = np.empty(self.n_eq)
        c[:NX] = X[0] - self.s0
        c[NX:] = (X[1:] - nxt).ravel()
        return c

    def eq_residual_and_jac(self, w, with_stages: bool = False):
        X, U, _ = self.unpack(w)
        veh, trk, dt = self.spec.vehicle, self.spec.track, self.spec.dt
        nxt = step_rk4(X[:-1], U, veh, trk, dt)
        A, Bu = step_jacobians(X[:-1], U, veh, trk, dt)
        c = np.empty(self.n_eq)
        c[:NX] = X[0] - self.s0
        c[NX:] = (X[1:] - nxt).ravel()
        E = np.zeros((self.n_eq, self.nw))
        E[:NX, :NX] = np.eye(NX)
        for k in range(self.N):
            r = NX * (k + 1)
            E[r : r + NX, NX * (k + 1) : NX * (k + 2)] = np.eye(NX)
            E[r : r + NX, NX * k : NX * (k + 1)] = -A[k]
            E[r : r + NX, self.u_index(k)] = -Bu[k]
        if with_stages:
            return c, E, A, Bu
        return c, E

    def lagrangian_hessian(self, w, lam_flat) -> np.ndarray:
        """Exact Hessian of the Lagrangian w.r.t. w (dense nw x nw)."""
        X, U, _ = self.unpack(w)
        H = np.diag(self.cost_hess_diag())
        D2 = step_hessians(X[:-1], U, self.spec.vehicle, self.spec.track, self.spec.dt)
        lam = lam_flat.reshape(self.N + 1, NX)
        # lam_{k+1}^T (x_{k+1} - Phi(x_k, u_k)) contributes -lam^T D2Phi
        Wk = -np.einsum("km,kmpq->kpq", lam[1:], D2)
        for k in range(self.N):
            idx = np.concatenate([np.arange(NX * k, NX * (k + 1)), [self.u_index(k)]])
            H[np.ix_(idx, idx)] += Wk[k]
        return H

    def to_relaxed(self) -> "NlpInstance":
        if self.relaxed:
            return self
        return NlpInstance(self.spec, self.s0, self.theta, relaxed=True)


def transcribe(spec: OcpSpec, s0, theta: ThetaVector) -> NlpInstance:
    """Build the NLP for one initial state; auto-relaxes out-of-lane starts."""
    s0 = np.asarray(s0, dtype=float)
    if s0.shape != (NX,):
        raise InvalidSpecError(f"initial state must have shape (6,), got {s0.shape}")
    if theta.variant != spec.cost_variant:
        raise InvalidSpecError("theta variant does not match the OCP cost variant")
    theta.validate(spec.lane_width)
    half = spec.lane_width / 2
    d0 = abs(float(s0[IDX_D]))
    if d0 < half:
        return NlpInstance(spec, s0, theta, relaxed=False)
    if d0 <= half + spec.relax_margin:
        return NlpInstance(spec, s0, theta, relaxed=True)
    raise InfeasibleStartError(
        f"|d|={d0:.3f} m exceeds the lane half-width {half:.3f} m by more than "
        f"the relaxation margin {spec.relax_margin:.3f} m"
    )


@dataclass
class SolveDiagnostics:
    iterations: int = 0
    qp_iterations: int = 0
    residual: float = np.inf
    active_count: int = 0
    relaxed: bool = False
    fallback: bool = False
    runtime_s: float = 0.0


@dataclass
class PrimalDualSolution:
    """Primal-dual MPC solution with the identified active set."""

    x: np.ndarray                 # (N+1, 6)
    u: np.ndarray                 # (N,)
    lam: np.ndarray               # (N+1, 6) shooting multipliers
    mu: np.ndarray                # (n_ineq,) >= 0
    active: np.ndarray            # (n_ineq,) bool working set
    kkt_residual: float
    converged: bool
    relaxed: bool = False
    slack: np.ndarray | None = None
    objective: float = np.nan
    diagnostics: SolveDiagnostics = field(default_factory=SolveDiagnostics)

    @property
    def action(self) -> float:
        return float(self.u[0])

    def primal(self, nlp: NlpInstance) -> np.ndarray:
        return nlp.pack(self.x, self.u, self.slack)


def kkt_residual(solution: PrimalDualSolution, nlp: NlpInstance) -> float:
    """Max infinity-norm over stationarity, feasibility, dual sign, and
    complementarity of the (unregularized) KKT conditions."""
    w = solution.primal(nlp)
    lam = np.asarray(solution.lam, dtype=float).ravel()
    mu = np.asarray(solution.mu, dtype=float)
    c, E = nlp.eq_residual_and_jac(w)
    h = nlp.ineq_values(w)
    stat = nlp.cost_grad(w) + E.T @ lam
    if mu.size:
        stat += nlp.ineq_gradients().T @ mu
    parts = [
        np.max(np.abs(stat)),
        np.max(np.abs(c)),
        max(0.0, float(np.max(h, initial=0.0))),
        max(0.0, float(np.max(-mu, initial=0.0))),
        float(np.max(np.abs(mu * h), initial=0.0)),
    ]
    return float(max(parts))


@dataclass
class SolverOptions:
    tol: float = 1e-6
    max_iter: int = 50
    reg: float = 1e-6
    max_qp_iter: int = 120
    armijo: float = 0.1
    min_alpha: float = 1e-4
    polish: bool = True
    polish_tol: float = 1e-11
    relax_fallback: bool = True


class _QpResult:
    __slots__ = ("p", "lam", "mu", "active", "iterations")

    def __init__(self, p, lam, mu, active, iterations):
        self.p = p
        self.lam = lam
        self.mu = mu
        self.active = active
        self.iterations = iterations


class SqpSolver:
    """SQP solver instance.  Owns mutable QP workspaces; do not share one
    instance across threads -- create one per rollout."""

    def __init__(self, options: SolverOptions | None = None):
        self.options = options or SolverOptions()

    # -- QP subproblem -----------------------------------------------------
    def _solve_qp(self, nlp: NlpInstance, Hd, g, E, beq, w, active0):
        """Primal-dual active-set method for
        min 1/2 p^T diag(Hd) p + g^T p  s.t.  E p = beq, bounds, G p <= hg."""
        nw, n_eq = nlp.nw, nlp.n_eq
        pl = nlp.lb - w
        pu = nlp.ub - w
        face_target = np.where(nlp.face_upper, pu[nlp.face_var], pl[nlp.face_var])
        hg = nlp.h_gen - (nlp.G @ w) if nlp.n_gen else np.zeros(0)

        active = active0.copy()
        act_face = active[: nlp.n_faces]
        act_gen = active[nlp.n_faces :]
        self._sanitize_working_set(nlp, act_face, act_gen)

        K0 = np.zeros((nw + n_eq, nw + n_eq))
        K0[:nw, :nw] = np.diag(Hd)
        K0[:nw, nw:] = E.T
        K0[nw:, :nw] = E
        rhs0 = np.concatenate([-g, beq])

        seen = set()
        single_mode = False
        tol_p = 1e-9
        tol_d = 1e-9
        for it in range(1, self.options.max_qp_iter + 1):
            gen_idx = np.where(act_gen)[0]
            n_act_gen = len(gen_idx)
            dim = nw + n_eq + n_act_gen
            K = np.zeros((dim, dim))
            K[: nw + n_eq, : nw + n_eq] = K0
            rhs = np.concatenate([rhs0, hg[gen_idx]])
            if n_act_gen:
                Ga = nlp.G[gen_idx]
                K[:nw, nw + n_eq :] = Ga.T
                K[nw + n_eq :, :nw] = Ga
            pinned = np.where(act_face)[0]
            pin_vars = nlp.face_var[pinned]
            if len(pin_vars):
                K[pin_vars, :] = 0.0
                K[pin_vars, pin_vars] = 1.0
                rhs[pin_vars] = face_target[pinned]
            try:
                y = np.linalg.solve(K, rhs)
            except np.linalg.LinAlgError:
                raise QpSubproblemError("singular working-set KKT system")
            p = y[:nw]
            lam = y[nw : nw + n_eq]
            nu_gen = y[nw + n_eq :]

            grad = Hd * p + g + E.T @ lam
            if n_act_gen:
                grad += Ga.T @ nu_gen
            mu_face = np.zeros(nlp.n_faces)
            if len(pinned):
                sgn = np.where(nlp.face_upper[pinned], -1.0, 1.0)
                mu_face[pinned] = sgn * grad[pin_vars]
            mu_gen = np.zeros(nlp.n_gen)
            mu_gen[gen_idx] = nu_gen

            # violations among inactive constraints
            viol_face = np.where(
                nlp.face_upper,
                p[nlp.face_var] - pu[nlp.face_var],
                pl[nlp.face_var] - p[nlp.face_var],
            )
            viol_face[act_face] = -np.inf
            viol_gen = (nlp.G @ p - hg) if nlp.n_gen else np.zeros(0)
            if nlp.n_gen:
                viol_gen[act_gen] = -np.inf
            neg_face = np.where(act_face, -mu_face, -np.inf)
            neg_gen = np.where(act_gen, -mu_gen, -np.inf) if nlp.n_gen else np.zeros(0)

            worst_viol = max(
                float(np.max(viol_face, initial=-np.inf)),
                float(np.max(viol_gen, initial=-np.inf)),
            )
            worst_neg = max(
                float(np.max(neg_face, initial=-np.inf)),
                float(np.max(neg_gen, initial=-np.inf)),
            )
            if worst_viol <= tol_p and worst_neg <= tol_d:
                mu = np.concatenate([np.maximum(mu_face, 0.0), np.maximum(mu_gen, 0.0)])
                return _QpResult(p, lam, mu, np.concatenate([act_face, act_gen]), it)

            if single_mode:
                # one change at a time, most-violated first
                if worst_viol > tol_p and worst_viol >= worst_neg:
                    self._add_most_violated(nlp, act_face, act_gen, viol_face, viol_gen)
                else:
                    self._drop_most_negative(nlp, act_face, act_gen, neg_face, neg_gen)
            else:
                act_face[(~act_face) & (viol_face > tol_p)] = True
                if nlp.n_gen:
                    act_gen[(~act_gen) & (viol_gen > tol_p)] = True
                act_face[act_face & (mu_face < -tol_d)] = False
                if nlp.n_gen:
                    act_gen[act_gen & (mu_gen < -tol_d)] = False
            self._sanitize_working_set(nlp, act_face, act_gen)
            key = (act_face.tobytes(), act_gen.tobytes())
            if key in seen:
                single_mode = True
            seen.add(key)
        raise QpSubproblemError("active-set QP did not settle")

    @staticmethod
    def _add_most_violated(nlp, act_face, act_gen, viol_face, viol_gen):
        vf = float(np.max(viol_face, initial=-np.inf))
        vg = float(np.max(viol_gen, initial=-np.inf))
        if vf >= vg:
            act_face[int(np.argmax(viol_face))] = True
        else:
            act_gen[int(np.argmax(viol_gen))] = True

    @staticmethod
    def _drop_most_negative(nlp, act_face, act_gen, neg_face, neg_gen):
        nf = float(np.max(neg_face, initial=-np.inf))
        ng = float(np.max(neg_gen, initial=-np.inf))
        if nf >= ng:
            act_face[int(np.argmax(neg_face))] = False
        else:
            act_gen[int(np.argmax(neg_gen))] = False

    @staticmethod
    def _sanitize_working_set(nlp, act_face, act_gen):
        # a variable must not be pinned at both faces at once
        active_vars = nlp.face_var[act_face]
        seen_var, counts = np.unique(active_vars, return_counts=True)
        for v in seen_var[counts > 1]:
            faces = np.where(act_face & (nlp.face_var == v))[0]
            act_face[faces[:-1]] = False
        if nlp.n_gen:
            # both soft-lane rows of one stage cannot be active together
            pairs = act_gen.reshape(-1, 2)
            both = pairs[:, 0] & pairs[:, 1]
            pairs[both, 1] = False

    # -- initialization ----------------------------------------------------
    def _initial_primal(self, nlp: NlpInstance) -> np.ndarray:
        spec = nlp.spec
        X = np.empty((nlp.N + 1, NX))
        X[0] = nlp.s0
        for k in range(nlp.N):
            X[k + 1] = step_rk4(X[k], 0.0, spec.vehicle, spec.track, spec.dt)
            X[k + 1] = np.clip(X[k + 1], nlp.lb[NX * (k + 1) : NX * (k + 2)], nlp.ub[NX * (k + 1) : NX * (k + 2)])
        U = np.zeros(nlp.N)
        if not nlp.relaxed:
            return nlp.pack(X, U)
        w = nlp.pack(X, U, np.zeros(nlp.N))
        viol = np.maximum(nlp.G @ w - nlp.h_gen, 0.0).reshape(-1, 2).max(axis=1)
        return nlp.pack(X, U, viol)

    def _warm_primal(self, nlp: NlpInstance, warm: PrimalDualSolution):
        X = np.array(warm.x, dtype=float)
        U = np.array(warm.u, dtype=float)
        X[0] = nlp.s0
        lam = np.asarray(warm.lam, dtype=float).ravel()
        if nlp.relaxed:
            w = nlp.pack(X, U, np.zeros(nlp.N))
            viol = np.maximum(nlp.G @ w - nlp.h_gen, 0.0).reshape(-1, 2).max(axis=1)
            w = nlp.pack(X, U, viol)
        else:
            w = nlp.pack(X, U)
            w = np.clip(w, nlp.lb, nlp.ub)
        if warm.mu.shape == (nlp.n_ineq,) and warm.relaxed == nlp.relaxed:
            active = warm.active.copy()
            mu = warm.mu.copy()
        else:
            active = np.zeros(nlp.n_ineq, dtype=bool)
            mu = np.zeros(nlp.n_ineq)
        return w, lam, mu, active

    # -- main loop -----------------------------------------------------------
    def solve(self, nlp: NlpInstance, warm: PrimalDualSolution | None = None) -> PrimalDualSolution:
        t0 = time.perf_counter()
        opts = self.options
        if warm is not None:
            w, lam, mu, active = self._warm_primal(nlp, warm)
        else:
            w = self._initial_primal(nlp)
            lam = np.zeros(nlp.n_eq)
            mu = np.zeros(nlp.n_ineq)
            active = np.zeros(nlp.n_ineq, dtype=bool)

        Hd_reg = nlp.cost_hess_diag() + opts.reg
        merit_nu = 1.0
        qp_total = 0
        best = None
        converged = False
        iterations = 0
        fallback_reason = None

        for it in range(opts.max_iter + 1):
            iterations = it
            c, E = nlp.eq_residual_and_jac(w)
            res = self._residual_parts(nlp, w, lam, mu, c, E)
            if best is None or res < best[0]:
                best = (res, w.copy(), lam.copy(), mu.copy(), active.copy())
            if res <= opts.tol:
                converged = True
                break
            if it == opts.max_iter:
                break
            g = nlp.cost_grad(w)
            try:
                qp = self._solve_qp(nlp, Hd_reg, g, E, -c, w, active)
            except QpSubproblemError as exc:
                fallback_reason = str(exc)
                break
            qp_total += qp.iterations
            active = qp.active
            merit_nu = max(merit_nu, 2.0 * float(np.max(np.abs(qp.lam), initial=0.0)), 1.0)
            f0 = nlp.objective(w)
            phi0 = f0 + merit_nu * np.sum(np.abs(c))
            dirder = float(g @ qp.p) - merit_nu * np.sum(np.abs(c))
            alpha = 1.0
            accepted = False
            while alpha >= opts.min_alpha:
                w_trial = w + alpha * qp.p
                phi_t = nlp.objective(w_trial) + merit_nu * np.sum(np.abs(nlp.eq_residual(w_trial)))
                if phi_t <= phi0 + opts.armijo * alpha * dirder:
                    accepted = True
                    break
                alpha *= 0.5
            if not accepted:
                alpha = opts.min_alpha
                w_trial = w + alpha * qp.p
            w = w_trial
            lam = qp.lam
            mu = qp.mu

        if not converged and best is not None:
            _, w, lam, mu, active = best

        if converged and opts.polish:
            w, lam, mu = self._polish(nlp, w, lam, mu, active)

        sol = self._package(nlp, w, lam, mu, active, converged, iterations, qp_total, t0)

        if not converged and opts.relax_fallback and not nlp.relaxed:
            relaxed_nlp = nlp.to_relaxed()
            sol2 = self.solve(relaxed_nlp, warm=None)
            if sol2.converged:
                sol2.diagnostics.fallback = True
                return sol2
        if fallback_reason is not None:
            sol.diagnostics.fallback = True
        return sol

    def _residual_parts(self, nlp, w, lam, mu, c, E) -> float:
        stat = nlp.cost_grad(w) + E.T @ lam
        if mu.size:
            stat += nlp.ineq_gradients().T @ mu
        h = nlp.ineq_values(w)
        return float(
            max(
                np.max(np.abs(stat)),
                np.max(np.abs(c)),
                max(0.0, float(np.max(h, initial=0.0))),
                max(0.0, float(np.max(-mu, initial=0.0))),
                float(np.max(np.abs(mu * h), initial=0.0)),
            )
        )

    def _polish(self, nlp, w, lam, mu, active):
        """Newton iterations on the KKT system with frozen active set."""
        opts = self.options
        Gh = nlp.ineq_gradients()
        act_idx = np.where(active)[0]
        Ga = Gh[act_idx]
        w_p, lam_p, mu_p = w.copy(), lam.copy(), mu.copy()
        before = None
        for _ in range(3):
            c, E = nlp.eq_residual_and_jac(w_p)
            h = nlp.ineq_values(w_p)
            stat = nlp.cost_grad(w_p) + E.T @ lam_p + Gh.T @ mu_p
            F = np.concatenate([stat, h[act_idx], c])
            res = float(np.max(np.abs(F), initial=0.0))
            if before is None:
                before = (res, w_p.copy(), lam_p.copy(), mu_p.copy())
            if res <= opts.polish_tol:
                break
            HL = nlp.lagrangian_hessian(w_p, lam_p)
            na = len(act_idx)
            dim = nlp.nw + na + nlp.n_eq
            J = np.zeros((dim, dim))
            J[: nlp.nw, : nlp.nw] = HL
            J[: nlp.nw, nlp.nw : nlp.nw + na] = Ga.T
            J[: nlp.nw, nlp.nw + na :] = E.T
            J[nlp.nw : nlp.nw + na, : nlp.nw] = Ga
            J[nlp.nw + na :, : nlp.nw] = E
            try:
                delta = np.linalg.solve(J, -F)
            except np.linalg.LinAlgError:
                break
            w_p += delta[: nlp.nw]
            mu_p[act_idx] += delta[nlp.nw : nlp.nw + na]
            lam_p += delta[nlp.nw + na :]
        # accept only if the polish actually improved things and kept signs
        c, E = nlp.eq_residual_and_jac(w_p)
        h = nlp.ineq_values(w_p)
        stat = nlp.cost_grad(w_p) + E.T @ lam_p + Gh.T @ mu_p
        res_after = float(max(np.max(np.abs(stat)), np.max(np.abs(c)), np.max(h[act_idx], initial=0.0)))
        ok = (
            res_after <= before[0] + 1e-12
            and np.all(mu_p[act_idx] >= -1e-9)
            and float(np.max(h[~active], initial=-np.inf)) <= 1e-9
        )
        if not ok:
            return before[1], before[2], before[3]
        mu_p = np.maximum(mu_p, 0.0)
        return w_p, lam_p, mu_p

    def _package(self, nlp, w, lam, mu, active, converged, iterations, qp_total, t0) -> PrimalDualSolution:
        X, U, S = nlp.unpack(w)
        sol = PrimalDualSolution(
            x=X.copy(),
            u=U.copy(),
            lam=lam.reshape(nlp.N + 1, NX).copy(),
            mu=mu.copy(),
            active=active.copy(),
            kkt_residual=np.inf,
            converged=converged,
            relaxed=nlp.relaxed,
            slack=None if S is None else S.copy(),
            objective=nlp.objective(w),
        )
        sol.kkt_residual = kkt_residual(sol, nlp)
        sol.converged = converged and sol.kkt_residual <= self.options.tol
        sol.diagnostics = SolveDiagnostics(
            iterations=iterations,
            qp_iterations=qp_total,
            residual=sol.kkt_residual,
            active_count=int(np.count_nonzero(active)),
            relaxed=nlp.relaxed,
            runtime_s=time.perf_counter() - t0,
        )
        return sol


def mpc_control(
    spec: OcpSpec,
    s0,
    theta: ThetaVector,
    warm: PrimalDualSolution | None = None,
    solver: SqpSolver | None = None,
):
    """Solve the receding-horizon problem and return (first action, solution)."""
    nlp = transcribe(spec, s0, theta)
    solver = solver or SqpSolver()
    sol = solver.solve(nlp, warm=warm)
    return sol.action, sol


def shift_solution(sol: PrimalDualSolution, nlp: NlpInstance) -> PrimalDualSolution:
    """Receding-horizon warm start: shift stages by one, duplicate the last."""
    x = np.vstack([sol.x[1:], sol.x[-1:]])
    u = np.concatenate([sol.u[1:], sol.u[-1:]])
    lam = np.vstack([sol.lam[1:], sol.lam[-1:]])
    mu = sol.mu.copy()
    active = sol.active.copy()
    n_state_faces = (6 if not sol.relaxed else 4) * nlp.N  # per-stage faces on x
    for arr in (mu, active):
        sf = arr[:n_state_faces].reshape(nlp.N, -1)
        sf[:-1] = sf[1:]
        uf = arr[n_state_faces : n_state_faces + 2 * nlp.N].reshape(nlp.N, 2)
        uf[:-1] = uf[1:]
    return replace(
        sol,
        x=x,
        u=u,
        lam=lam,
        mu=mu,
        active=active,
        slack=None if sol.slack is None else np.concatenate([sol.slack[1:], sol.slack[-1:]]),
    )
