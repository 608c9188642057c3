"""Frenet-frame vehicle model: linear single-track dynamics + road kinematics.

State vector ordering (used everywhere as plain float64 arrays):

    0  v_y      lateral velocity            [m/s]
    1  psi_dot  yaw rate                    [rad/s]
    2  sigma    arc length along the road   [m]
    3  d        centerline deviation        [m]
    4  theta_e  heading error               [rad]
    5  delta    steering angle              [rad]

The single control is the steering rate ``u = d(delta)/dt``.  Road curvature
is looked up from a :class:`~mpc_imitation.track.TrackSpec` at each RK stage;
its derivative with respect to sigma is defined as zero (piecewise-constant
curvature, gradient-blocked road context), so all Jacobians here treat the
stage curvatures as constants.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .track import TrackSpec, curvature_at

NX = 6
NU = 1
IDX_VY, IDX_PSIDOT, IDX_SIGMA, IDX_D, IDX_THETA, IDX_DELTA = range(6)
STATE_FIELDS = ("v_y", "psi_dot", "sigma", "d", "theta_e", "delta")

DEFAULT_DT = 0.1
SINGULARITY_EPS = 1e-6


class SingularityError(ValueError):
    """Raised when a state reaches the Frenet pole 1 - kappa*d <= eps."""


@dataclass(frozen=True)
class VehicleParams:
    """Single-track model parameters; defaults are a generic compact car."""

    mass: float = 1380.0               # kg
    yaw_inertia: float = 2420.0        # kg m^2
    cornering_stiffness_front: float = 1.2e5   # N/rad
    cornering_stiffness_rear: float = 1.0e5    # N/rad
    dist_cg_front: float = 1.05        # m, CG to front axle
    dist_cg_rear: float = 1.61         # m, CG to rear axle
    v_x: float = 50.0 / 3.6            # m/s, constant longitudinal speed

    def __post_init__(self):
        for name in self.__dataclass_fields__:
            if getattr(self, name) <= 0:
                raise ValueError(f"VehicleParams.{name} must be positive")

    def lateral_coeffs(self):
        """Constant coefficients of the linear (v_y, psi_dot) subsystem.

        Returns (a11, a12, b1, a21, a22, b2) with
            dv_y/dt   = a11 v_y + a12 psi_dot + b1 delta
            dpsi_dot/dt = a21 v_y + a22 psi_dot + b2 delta
        """
        m, iz = self.mass, self.yaw_inertia
        cf, cr = self.cornering_stiffness_front, self.cornering_stiffness_rear
        a, b = self.dist_cg_front, self.dist_cg_rear
        vx = self.v_x
        a11 = -(cf + cr) / (m * vx)
        a12 = -vx + (cr * b - cf * a) / (m * vx)
        b1 = cf / m
        a21 = (cr * b - cf * a) / (iz * vx)
        a22 = -(cf * a * a + cr * b * b) / (iz * vx)
        b2 = cf * a / iz
        return a11, a12, b1, a21, a22, b2

    @classmethod
    def from_file(cls, path) -> "VehicleParams":
        """Read ``key: value`` overrides; unspecified keys keep defaults."""
        overrides = {}
        valid = set(cls.__dataclass_fields__)
        with open(path) as fh:
            for lineno, raw in enumerate(fh, start=1):
                line = raw.split("#", 1)[0].strip()
                if not line:
                    continue
                key, sep, value = line.partition(":")
                if not sep:
                    raise ValueError(f"{path}:{lineno}: expected 'key: value'")
                key = key.strip()
                if key not in valid:
                    raise ValueError(f"{path}:{lineno}: unknown parameter {key!r}")
                overrides[key] = float(value)
        return cls(**overrides)


@dataclass(frozen=True)
class VehicleState:
    """Named view of one state vector, for construction and inspection."""

    v_y: float = 0.0
    psi_dot: float = 0.0
    sigma: float = 0.0
    d: float = 0.0
    theta_e: float = 0.0
    delta: float = 0.0

    def as_array(self) -> np.ndarray:
        return np.array([self.v_y, self.psi_dot, self.sigma, self.d, self.theta_e, self.delta])

    @classmethod
    def from_array(cls, x) -> "VehicleState":
        x = np.asarray(x, dtype=float)
        return cls(*(float(v) for v in x))


def _check_singularity(margin):
    if np.any(margin <= SINGULARITY_EPS):
        raise SingularityError(
            f"state too close to the curvature pole: min(1 - kappa*d) = {np.min(margin):.3e}"
        )


def dynamics_continuous(x, u, p: VehicleParams, kappa):
    """Continuous-time state derivative.  Broadcasts over leading axes.

    ``x``: (..., 6); ``u``: (...,); ``kappa``: (...,).
    """
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    kappa = np.asarray(kappa, dtype=float)
    a11, a12, b1, a21, a22, b2 = p.lateral_coeffs()
    vy, r, d, th, de = x[..., 0], x[..., 1], x[..., 3], x[..., 4], x[..., 5]
    margin = 1.0 - kappa * d
    _check_singularity(margin)
    sin_t, cos_t = np.sin(th), np.cos(th)
    sdot = (p.v_x * cos_t - vy * sin_t) / margin
    out = np.empty_like(x)
    out[..., 0] = a11 * vy + a12 * r + b1 * de
    out[..., 1] = a21 * vy + a22 * r + b2 * de
    out[..., 2] = sdot
    out[..., 3] = p.v_x * sin_t - vy * cos_t
    out[..., 4] = r - kappa * sdot
    out[..., 5] = u
    return out


def dynamics_jacobian(x, u, p: VehicleParams, kappa):
    """d(xdot)/dx, treating kappa as constant.  Shape (..., 6, 6)."""
    x = np.asarray(x, dtype=float)
    kappa = np.asarray(kappa, dtype=float)
    a11, a12, b1, a21, a22, b2 = p.lateral_coeffs()
    vy, d, th = x[..., 0], x[..., 3], x[..., 4]
    m = 1.0 - kappa * d
    _check_singularity(m)
    sin_t, cos_t = np.sin(th), np.cos(th)
    n = p.v_x * cos_t - vy * sin_t
    n_th = -p.v_x * sin_t - vy * cos_t

    A = np.zeros(x.shape[:-1] + (NX, NX))
    A[..., 0, 0], A[..., 0, 1], A[..., 0, 5] = a11, a12, b1
    A[..., 1, 0], A[..., 1, 1], A[..., 1, 5] = a21, a22, b2
    ds_dvy = -sin_t / m
    ds_dd = n * kappa / m**2
    ds_dth = n_th / m
    A[..., 2, 0], A[..., 2, 3], A[..., 2, 4] = ds_dvy, ds_dd, ds_dth
    A[..., 3, 0] = -cos_t
    A[..., 3, 4] = p.v_x * cos_t + vy * sin_t
    A[..., 4, 1] = 1.0
    A[..., 4, 0] = -kappa * ds_dvy
    A[..., 4, 3] = -kappa * ds_dd
    A[..., 4, 4] = -kappa * ds_dth
    return A


# d(xdot)/du is constant: only the steering integrator sees u.
B_COLUMN = np.zeros(NX)
B_COLUMN[IDX_DELTA] = 1.0


def dynamics_hessian(x, u, p: VehicleParams, kappa):
    """Second derivative tensor of xdot w.r.t. (x, u).  Shape (..., 6, 7, 7).

    Only the kinematic rows (sigma, d, theta_e) are nonlinear, and only in
    (v_y, d, theta_e); everything else is identically zero.
    """
    x = np.asarray(x, dtype=float)
    kappa = np.asarray(kappa, dtype=float)
    vy, d, th = x[..., 0], x[..., 3], x[..., 4]
    m = 1.0 - kappa * d
    _check_singularity(m)
    sin_t, cos_t = np.sin(th), np.cos(th)
    n = p.v_x * cos_t - vy * sin_t
    n_th = -p.v_x * sin_t - vy * cos_t
    n_thth = -p.v_x * cos_t + vy * sin_t

    T = np.zeros(x.shape[:-1] + (NX, NX + NU, NX + NU))
    # sigma-dot row
    s_vy_d = -sin_t * kappa / m**2
    s_vy_th = -cos_t / m
    s_d_d = 2.0 * n * kappa**2 / m**3
    s_d_th = n_th * kappa / m**2
    s_th_th = n_thth / m
    for (i, j), val in (
        ((IDX_VY, IDX_D), s_vy_d),
        ((IDX_VY, IDX_THETA), s_vy_th),
        ((IDX_D, IDX_D), s_d_d),
        ((IDX_D, IDX_THETA), s_d_th),
        ((IDX_THETA, IDX_THETA), s_th_th),
    ):
        T[..., IDX_SIGMA, i, j] = val
        T[..., IDX_THETA, i, j] = -kappa * val
        if i != j:
            T[..., IDX_SIGMA, j, i] = val
            T[..., IDX_THETA, j, i] = -kappa * val
    # d-dot row
    T[..., IDX_D, IDX_THETA, IDX_THETA] = -p.v_x * sin_t + vy * cos_t
    T[..., IDX_D, IDX_VY, IDX_THETA] = sin_t
    T[..., IDX_D, IDX_THETA, IDX_VY] = sin_t
    return T


_RK_OFFSETS = (0.5, 0.5, 1.0)


def _stages(x, u, p, track, dt):
    """RK4 stage states and their curvatures."""
    xs = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    stages = []
    xi = xs
    k_prev = None
    for c in (0.0,) + _RK_OFFSETS:
        if k_prev is not None:
            xi = xs + c * dt * k_prev
        kap = np.asarray(curvature_at(track, xi[..., IDX_SIGMA]), dtype=float)
        k = dynamics_continuous(xi, u, p, kap)
        stages.append((xi, kap, k))
        k_prev = k
    return stages


def step_rk4(x, u, p: VehicleParams, track: TrackSpec, dt: float = DEFAULT_DT):
    """Classical RK4 step with curvature sampled at each stage's sigma."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    stages = _stages(x, u, p, track, dt)
    k1, k2, k3, k4 = (s[2] for s in stages)
    return np.asarray(x, dtype=float) + (dt / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)


def step_jacobians(x, u, p: VehicleParams, track: TrackSpec, dt: float = DEFAULT_DT):
    """Exact Jacobians of the RK4 map: (d x+ / d x, d x+ / d u).

    Shapes (..., 6, 6) and (..., 6).  Stage curvatures are held constant
    (d kappa / d sigma := 0).
    """
    stages = _stages(x, u, p, track, dt)
    batch = np.asarray(x, dtype=float).shape[:-1]
    eye = np.broadcast_to(np.eye(NX), batch + (NX, NX))
    Dk = []
    Dku = []
    for c, (xi, kap, _) in zip((0.0,) + _RK_OFFSETS, stages):
        A = dynamics_jacobian(xi, u, p, kap)
        Dx = eye if not Dk else eye + c * dt * Dk[-1]
        Dxu = np.zeros(batch + (NX,)) if not Dku else c * dt * Dku[-1]
        Dk.append(A @ Dx)
        Dku.append(np.einsum("...mn,...n->...m", A, Dxu) + B_COLUMN)
    w = np.array([1.0, 2.0, 2.0, 1.0]) * dt / 6.0
    Jx = eye + sum(wi * D for wi, D in zip(w, Dk))
    Ju = sum(wi * D for wi, D in zip(w, Dku))
    return Jx, Ju


def step_hessians(x, u, p: VehicleParams, track: TrackSpec, dt: float = DEFAULT_DT):
    """Second derivative tensor of the RK4 map w.r.t. (x, u).

    Shape (..., 6, 7, 7), ordered (x0..x5, u).  Used for the exact
    Lagrangian Hessian in the sensitivity layer.
    """
    stages = _stages(x, u, p, track, dt)
    batch = np.asarray(x, dtype=float).shape[:-1]
    nin = NX + NU
    P = np.zeros((NX, nin))
    P[:, :NX] = np.eye(NX)
    P = np.broadcast_to(P, batch + (NX, nin))
    q = np.zeros(nin)
    q[NX] = 1.0

    Dk, D2k = [], []
    for c, (xi, kap, _) in zip((0.0,) + _RK_OFFSETS, stages):
        A = dynamics_jacobian(xi, u, p, kap)
        T = dynamics_hessian(xi, u, p, kap)
        Dx = P if not Dk else P + c * dt * Dk[-1]
        D2x = np.zeros(batch + (NX, nin, nin)) if not D2k else c * dt * D2k[-1]
        # w maps d(f inputs)/d(step inputs): stack state rows and the u row
        w_in = np.concatenate([Dx, np.broadcast_to(q, batch + (1, nin))], axis=-2)
        Dk.append(A @ Dx + np.einsum("m,p->mp", B_COLUMN, q))
        D2k.append(
            np.einsum("...mab,...ap,...bq->...mpq", T, w_in, w_in)
            + np.einsum("...mn,...npq->...mpq", A, D2x)
        )
    w = np.array([1.0, 2.0, 2.0, 1.0]) * dt / 6.0
    return sum(wi * D for wi, D in zip(w, D2k))
