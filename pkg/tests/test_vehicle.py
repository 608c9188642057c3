import numpy as np
import pytest

from mpc_imitation.track import TrackSpec, curvature_at, default_track
from mpc_imitation.vehicle import (
    DEFAULT_DT,
    IDX_SIGMA,
    SingularityError,
    VehicleParams,
    VehicleState,
    dynamics_continuous,
    dynamics_hessian,
    dynamics_jacobian,
    step_hessians,
    step_jacobians,
    step_rk4,
)

P = VehicleParams()
STRAIGHT = TrackSpec(segments=((10000.0, 0.0),), lane_width=4.5)


def reference_dynamics(x, u, p, kappa):
    """Independent re-implementation of the closed-form state derivative."""
    vy, r, sigma, d, th, de = x
    m, iz = p.mass, p.yaw_inertia
    cf, cr = p.cornering_stiffness_front, p.cornering_stiffness_rear
    a, b = p.dist_cg_front, p.dist_cg_rear
    vx = p.v_x
    vy_dot = (-(cf + cr) / (m * vx)) * vy + (-vx + (cr * b - cf * a) / (m * vx)) * r + (cf / m) * de
    r_dot = ((cr * b - cf * a) / (iz * vx)) * vy + (-(cf * a**2 + cr * b**2) / (iz * vx)) * r + (cf * a / iz) * de
    denom = 1.0 - kappa * d
    s_dot = (vx * np.cos(th) - vy * np.sin(th)) / denom
    d_dot = vx * np.sin(th) - vy * np.cos(th)
    th_dot = r - kappa * s_dot
    return np.array([vy_dot, r_dot, s_dot, d_dot, th_dot, u])


def random_states(rng, n, lane_half=2.0):
    x = np.zeros((n, 6))
    x[:, 0] = rng.uniform(-1.0, 1.0, n)
    x[:, 1] = rng.uniform(-0.5, 0.5, n)
    x[:, 2] = rng.uniform(0.0, 1200.0, n)
    x[:, 3] = rng.uniform(-lane_half, lane_half, n)
    x[:, 4] = rng.uniform(-0.2, 0.2, n)
    x[:, 5] = rng.uniform(-0.3, 0.3, n)
    return x


class TestContinuousDynamics:
    def test_straight_line_equilibrium(self):
        x = np.zeros(6)
        xdot = dynamics_continuous(x, 0.0, P, 0.0)
        expected = np.zeros(6)
        expected[IDX_SIGMA] = P.v_x
        np.testing.assert_allclose(xdot, expected, atol=1e-15)

    def test_singularity_raises(self):
        x = np.zeros(6)
        x[3] = 100.0  # kappa*d = 1
        with pytest.raises(SingularityError):
            dynamics_continuous(x, 0.0, P, 0.01)

    def test_matches_independent_implementation(self):
        rng = np.random.default_rng(7)
        for x in random_states(rng, 100):
            u = rng.uniform(-0.5, 0.5)
            kappa = rng.uniform(-0.015, 0.015)
            got = dynamics_continuous(x, u, P, kappa)
            want = reference_dynamics(x, u, P, kappa)
            np.testing.assert_allclose(got, want, rtol=1e-12, atol=1e-15)

    def test_lateral_subsystem_linearity(self):
        rng = np.random.default_rng(3)
        x = random_states(rng, 1)[0]
        x[3] = 0.0
        x[4] = 0.0  # theta_e = 0, kappa = 0: bicycle block strictly linear
        f1 = dynamics_continuous(x, 0.0, P, 0.0)
        x2 = x.copy()
        x2[[0, 1, 5]] *= 2.0
        f2 = dynamics_continuous(x2, 0.0, P, 0.0)
        np.testing.assert_allclose(f2[:2], 2.0 * f1[:2], rtol=1e-12)


class TestStepRk4:
    def test_straight_advances_sigma_only(self):
        x = np.zeros(6)
        nxt = step_rk4(x, 0.0, P, STRAIGHT, 0.1)
        assert nxt[IDX_SIGMA] == pytest.approx(P.v_x * 0.1, rel=1e-14)
        np.testing.assert_allclose(np.delete(nxt, IDX_SIGMA), 0.0, atol=1e-15)

    def test_tiny_dt_keeps_state(self):
        x = np.array([0.2, 0.05, 10.0, 0.3, 0.02, 0.01])
        nxt = step_rk4(x, 0.1, P, STRAIGHT, 1e-12)
        np.testing.assert_allclose(nxt, x, atol=1e-9)

    def test_fourth_order_convergence(self):
        # The lateral subsystem has a ~0.09 s time constant, so the halving
        # must happen in the asymptotic regime (dt=0.1 gives ratio ~27
        # independent of state amplitude; dt<=0.01 shows the true order).
        x = np.array([0.3, 0.1, 5.0, 0.4, 0.05, 0.08])
        u = 0.2
        track = default_track()

        def integrate(dt, t_end=0.2):
            n = int(round(t_end / dt))
            xi = x
            for _ in range(n):
                xi = step_rk4(xi, u, P, track, dt)
            return xi

        ref = integrate(2e-5)
        err_coarse = np.linalg.norm(integrate(0.01) - ref)
        err_fine = np.linalg.norm(integrate(0.005) - ref)
        ratio = err_coarse / err_fine
        assert 13.0 <= ratio <= 19.0  # 16 +/- 3

    def test_rejects_nonpositive_dt(self):
        with pytest.raises(ValueError):
            step_rk4(np.zeros(6), 0.0, P, STRAIGHT, 0.0)


class TestStepJacobians:
    def test_finite_differences(self):
        rng = np.random.default_rng(11)
        track = default_track()
        h = 1e-6
        for x in random_states(rng, 100):
            # keep every FD sample inside one curvature segment
            x[IDX_SIGMA] = (x[IDX_SIGMA] % 1200.0) * 0.99 + 2.0
            if abs(curvature_at(track, x[IDX_SIGMA])) != abs(
                curvature_at(track, x[IDX_SIGMA] + P.v_x * DEFAULT_DT + 0.1)
            ):
                continue
            u = rng.uniform(-0.5, 0.5)
            Jx, Ju = step_jacobians(x, u, P, track, DEFAULT_DT)
            fd_x = np.zeros((6, 6))
            for j in range(6):
                dx = np.zeros(6)
                dx[j] = h
                fd_x[:, j] = (
                    step_rk4(x + dx, u, P, track, DEFAULT_DT)
                    - step_rk4(x - dx, u, P, track, DEFAULT_DT)
                ) / (2 * h)
            fd_u = (
                step_rk4(x, u + h, P, track, DEFAULT_DT)
                - step_rk4(x, u - h, P, track, DEFAULT_DT)
            ) / (2 * h)
            scale = np.maximum(np.abs(fd_x), 1.0)
            assert np.max(np.abs(Jx - fd_x) / scale) <= 1e-6
            assert np.max(np.abs(Ju - fd_u) / np.maximum(np.abs(fd_u), 1.0)) <= 1e-6

    def test_sigma_column_structure_on_straight(self):
        x = np.array([0.1, 0.02, 50.0, 0.3, 0.01, 0.05])
        Jx, _ = step_jacobians(x, 0.1, P, STRAIGHT, DEFAULT_DT)
        col = Jx[:, IDX_SIGMA]
        expected = np.zeros(6)
        expected[IDX_SIGMA] = 1.0
        np.testing.assert_allclose(col, expected, atol=1e-14)

    def test_delta_row_control_gain_is_dt(self):
        rng = np.random.default_rng(5)
        x = random_states(rng, 1)[0]
        _, Ju = step_jacobians(x, 0.3, P, default_track(), DEFAULT_DT)
        assert Ju[5] == pytest.approx(DEFAULT_DT, rel=1e-14)

    def test_batched_matches_loop(self):
        rng = np.random.default_rng(13)
        xs = random_states(rng, 8)
        us = rng.uniform(-0.5, 0.5, 8)
        track = default_track()
        Jx_b, Ju_b = step_jacobians(xs, us, P, track, DEFAULT_DT)
        for i in range(8):
            Jx, Ju = step_jacobians(xs[i], us[i], P, track, DEFAULT_DT)
            np.testing.assert_allclose(Jx_b[i], Jx, rtol=1e-14)
            np.testing.assert_allclose(Ju_b[i], Ju, rtol=1e-14)


class TestSecondDerivatives:
    def test_dynamics_hessian_vs_fd_of_jacobian(self):
        rng = np.random.default_rng(17)
        h = 1e-6
        for x in random_states(rng, 20):
            kappa = rng.uniform(-0.015, 0.015)
            T = dynamics_hessian(x, 0.1, P, kappa)
            for j in range(6):
                dx = np.zeros(6)
                dx[j] = h
                fd = (
                    dynamics_jacobian(x + dx, 0.1, P, kappa)
                    - dynamics_jacobian(x - dx, 0.1, P, kappa)
                ) / (2 * h)
                np.testing.assert_allclose(T[:, :6, j], fd, rtol=2e-5, atol=1e-7)

    def test_step_hessian_vs_fd_of_step_jacobian(self):
        rng = np.random.default_rng(19)
        h = 1e-6
        x = random_states(rng, 1)[0]
        x[IDX_SIGMA] = 30.0  # stays within the first straight of default track
        u = 0.2
        track = default_track()
        D2 = step_hessians(x, u, P, track, DEFAULT_DT)
        for j in range(7):
            dx = np.zeros(6)
            du = 0.0
            if j < 6:
                dx[j] = h
            else:
                du = h
            Jp = step_jacobians(x + dx, u + du, P, track, DEFAULT_DT)
            Jm = step_jacobians(x - dx, u - du, P, track, DEFAULT_DT)
            fd = np.concatenate(
                [(Jp[0] - Jm[0]) / (2 * h), ((Jp[1] - Jm[1]) / (2 * h))[:, None]], axis=1
            )
            np.testing.assert_allclose(D2[:, :, j], fd, rtol=5e-5, atol=1e-7)


class TestParams:
    def test_rejects_nonpositive(self):
        with pytest.raises(ValueError):
            VehicleParams(mass=0.0)

    def test_from_file(self, tmp_path):
        path = tmp_path / "veh.cfg"
        path.write_text("mass: 1500\nv_x: 20.0  # m/s\n")
        p = VehicleParams.from_file(path)
        assert p.mass == 1500.0
        assert p.v_x == 20.0
        assert p.yaw_inertia == VehicleParams().yaw_inertia

    def test_from_file_unknown_key(self, tmp_path):
        path = tmp_path / "veh.cfg"
        path.write_text("masses: 1500\n")
        with pytest.raises(ValueError, match="unknown parameter"):
            VehicleParams.from_file(path)

    def test_state_round_trip(self):
        s = VehicleState(v_y=0.1, sigma=5.0, d=-0.2)
        np.testing.assert_array_equal(s.as_array(), [0.1, 0.0, 5.0, -0.2, 0.0, 0.0])
        assert VehicleState.from_array(s.as_array()) == s
