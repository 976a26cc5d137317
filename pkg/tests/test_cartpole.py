"""Dynamics tests: symbolic oracle, RK4 order, noise, encoders, linearization."""

import math

import numpy as np
import pytest
import sympy as sp

from pixelfb import cartpole as cp

PARAMS = cp.CartpoleParams()
FRICTIONLESS = cp.CartpoleParams(viscous_friction_cart=0.0, viscous_friction_pole=0.0)


def lagrangian_accelerations(p, v, th, om, u, params):
    """Independent derivation of the accelerations via the Lagrangian.

    Cart of mass M sliding horizontally, uniform rod of mass m and length L
    hinged at the cart; generalized forces are the cart force minus viscous
    cart friction and a viscous joint torque.
    """
    t = sp.symbols("t")
    M, m, L, g, bc, bp, F = sp.symbols("M m L g b_c b_p F")
    pf = sp.Function("pf")(t)
    thf = sp.Function("thf")(t)
    lc = L / 2
    inertia_com = m * L**2 / 12
    x_com = pf + lc * sp.sin(thf)
    y_com = lc * sp.cos(thf)
    kinetic = (
        M * pf.diff(t) ** 2 / 2
        + m * (x_com.diff(t) ** 2 + y_com.diff(t) ** 2) / 2
        + inertia_com * thf.diff(t) ** 2 / 2
    )
    potential = m * g * lc * sp.cos(thf)
    lag = kinetic - potential
    eq_p = sp.Eq(lag.diff(pf.diff(t)).diff(t) - lag.diff(pf), F - bc * pf.diff(t))
    eq_th = sp.Eq(lag.diff(thf.diff(t)).diff(t) - lag.diff(thf), -bp * thf.diff(t))
    sol = sp.solve([eq_p, eq_th], [pf.diff(t, 2), thf.diff(t, 2)], dict=True)[0]
    subs = {
        pf.diff(t): v,
        thf.diff(t): om,
        pf: p,
        thf: th,
        M: params.cart_mass,
        m: params.pole_mass,
        L: params.pole_length,
        g: params.gravity,
        bc: params.viscous_friction_cart,
        bp: params.viscous_friction_pole,
        F: u,
    }
    v_dot = float(sol[pf.diff(t, 2)].subs(subs))
    om_dot = float(sol[thf.diff(t, 2)].subs(subs))
    return v_dot, om_dot


class TestContinuousDynamics:
    def test_upright_equilibrium(self):
        d = cp.continuous_dynamics(cp.CartpoleState(), 0.0, PARAMS)
        assert np.allclose(d, 0.0)

    def test_hanging_equilibrium(self):
        d = cp.continuous_dynamics(cp.CartpoleState(theta=math.pi), 0.0, PARAMS)
        assert np.allclose(d, 0.0)

    def test_pole_falls_away_from_upright(self):
        d = cp.continuous_dynamics(cp.CartpoleState(theta=0.1), 0.0, FRICTIONLESS)
        assert d[3] > 0.0

    def test_matches_lagrangian_oracle(self):
        rng = np.random.default_rng(3)
        for _ in range(5):
            p, v, th, om = rng.uniform(-1.0, 1.0, size=4) * [0.5, 2.0, 3.0, 4.0]
            u = rng.uniform(-8.0, 8.0)
            got = cp.continuous_dynamics(cp.CartpoleState(p, v, th, om), u, PARAMS)
            v_dot, om_dot = lagrangian_accelerations(p, v, th, om, u, PARAMS)
            assert got[0] == pytest.approx(v, abs=1e-12)
            assert got[2] == pytest.approx(om, abs=1e-12)
            assert got[1] == pytest.approx(v_dot, rel=1e-9)
            assert got[3] == pytest.approx(om_dot, rel=1e-9)


def rollout(x0, u, params, dt, n_steps):
    x = np.asarray(x0, dtype=float)
    for _ in range(n_steps):
        x = cp.step_array(x, u, params, dt)
    return x


def fine_reference(x0, u, params, dt_coarse, n_steps, substeps=1000):
    return rollout(x0, u, params, dt_coarse / substeps, n_steps * substeps)


class TestStep:
    def test_equilibrium_fixed_point(self):
        s = cp.CartpoleState()
        assert np.allclose(cp.step(s, 0.0, PARAMS).as_array(), s.as_array())

    def test_matches_fine_integrator(self):
        # Frozen from the fine-step oracle: after the pole falls from 0.05 rad
        # and whips through the bottom, the per-component errors are
        # [1.8e-7, 3.4e-7, 5.1e-6, 2.3e-5]; the omega bound dominates.
        x0 = np.array([0.0, 0.0, 0.05, 0.0])
        got = rollout(x0, 0.0, PARAMS, cp.DT, 60)
        ref = fine_reference(x0, 0.0, PARAMS, cp.DT, 60)
        err = np.abs(cp.state_error(got, ref))
        assert np.all(err < np.array([1e-5, 1e-5, 1e-5, 3e-5]))

    def test_fourth_order_convergence(self):
        # free swing about hanging: smooth trajectory well inside the
        # asymptotic regime at 60 Hz (measured ratio 16.5)
        x0 = np.array([0.0, 0.0, 2.8, 0.0])
        ref = rollout(x0, 0.0, PARAMS, 1.0 / (60 * 1024), 60 * 1024)
        err_coarse = np.linalg.norm(cp.state_error(rollout(x0, 0.0, PARAMS, 1 / 60, 60), ref))
        err_half = np.linalg.norm(cp.state_error(rollout(x0, 0.0, PARAMS, 1 / 120, 120), ref))
        ratio = err_coarse / err_half
        assert 12.0 <= ratio <= 20.0, f"RK4 order ratio {ratio}"

    def test_energy_conservation_frictionless(self):
        state = cp.CartpoleState(theta=2.5)
        e0 = cp.mechanical_energy(state, FRICTIONLESS)
        drift = 0.0
        for _ in range(300):
            state = cp.step(state, 0.0, FRICTIONLESS)
            drift = max(drift, abs(cp.mechanical_energy(state, FRICTIONLESS) - e0))
        assert drift / abs(e0) < 1e-3

    def test_theta_always_wrapped(self):
        rng = np.random.default_rng(0)
        state = cp.CartpoleState(0.0, 0.0, 3.0, 5.0)
        for _ in range(200):
            state = cp.step(state, rng.uniform(-10, 10), PARAMS)
            assert -math.pi < state.theta <= math.pi

    def test_rejects_bad_dt(self):
        with pytest.raises(ValueError):
            cp.step(cp.CartpoleState(), 0.0, PARAMS, dt=0.0)


class TestStepTrue:
    def test_zero_noise_matches_step(self):
        noise = cp.NoiseConfig(process_noise_std=0.0)
        rng = np.random.default_rng(1)
        s = cp.CartpoleState(0.1, 0.2, 0.3, 0.4)
        assert np.array_equal(
            cp.step_true(s, 1.0, PARAMS, noise, rng).as_array(),
            cp.step(s, 1.0, PARAMS).as_array(),
        )

    def test_deterministic_given_seed(self):
        noise = cp.NoiseConfig()
        s = cp.CartpoleState(0.1, 0.0, 0.2, 0.0)
        a = cp.step_true(s, 1.0, PARAMS, noise, np.random.default_rng(42)).as_array()
        b = cp.step_true(s, 1.0, PARAMS, noise, np.random.default_rng(42)).as_array()
        assert np.array_equal(a, b)

    def test_monte_carlo_mean_matches_noiseless(self):
        noise = cp.NoiseConfig(process_noise_std=0.5)
        rng = np.random.default_rng(7)
        s = cp.CartpoleState(0.0, 0.0, 0.2, 0.0)
        n = 10_000
        samples = np.array(
            [cp.step_true(s, 0.0, PARAMS, noise, rng).as_array() for _ in range(n)]
        )
        mean = samples.mean(axis=0)
        tol = 3.0 * samples.std(axis=0) / math.sqrt(n) + 1e-12
        ref = cp.step(s, 0.0, PARAMS).as_array()
        assert np.all(np.abs(mean - ref) <= tol + 1e-6 * np.abs(ref))


class TestSampleTrueParams:
    def test_zero_error_is_identity(self):
        rng = np.random.default_rng(0)
        assert cp.sample_true_params(PARAMS, 0.0, rng) == PARAMS

    def test_within_five_percent(self):
        rng = np.random.default_rng(5)
        drawn = cp.sample_true_params(PARAMS, 0.05, rng)
        for name in ("cart_mass", "pole_mass", "pole_length", "gravity"):
            ratio = getattr(drawn, name) / getattr(PARAMS, name)
            assert 0.95 <= ratio <= 1.05

    def test_reproducible(self):
        a = cp.sample_true_params(PARAMS, 0.05, np.random.default_rng(9))
        b = cp.sample_true_params(PARAMS, 0.05, np.random.default_rng(9))
        assert a == b

    def test_bad_error_rejected(self):
        with pytest.raises(ValueError):
            cp.sample_true_params(PARAMS, 1.5, np.random.default_rng(0))


class TestEncoder:
    NOISE = cp.NoiseConfig()

    def test_exact_on_count_boundary(self):
        p = 1234 / self.NOISE.encoder_counts_position
        state = cp.CartpoleState(p=p)
        p_meas, _ = cp.encoder_measure(state, self.NOISE)
        assert p_meas == pytest.approx(p, abs=1e-15)

    def test_angle_quantization_formula(self):
        state = cp.CartpoleState(theta=0.001)
        _, th_meas = cp.encoder_measure(state, self.NOISE)
        expected = round(0.001 * 4096 / math.tau) * math.tau / 4096
        assert th_meas == pytest.approx(expected, abs=1e-15)

    def test_error_at_most_half_count(self):
        rng = np.random.default_rng(11)
        for _ in range(100):
            state = cp.CartpoleState(p=rng.uniform(-1, 1), theta=rng.uniform(-3, 3))
            p_meas, th_meas = cp.encoder_measure(state, self.NOISE)
            assert abs(p_meas - state.p) <= 0.5 / self.NOISE.encoder_counts_position + 1e-15
            assert abs(th_meas - state.theta) <= 0.5 * math.tau / self.NOISE.encoder_counts_angle + 1e-15


class TestLinearize:
    def test_matches_independent_finite_differences(self):
        x0 = cp.CartpoleState(0.05, -0.1, 0.08, 0.2)
        A, B = cp.linearize(PARAMS, x0, 0.5)
        h = 1e-5
        x_arr = x0.as_array()
        A_ref = np.zeros((4, 4))
        for i in range(4):
            xp, xm = x_arr.copy(), x_arr.copy()
            xp[i] += h
            xm[i] -= h
            A_ref[:, i] = (cp.step_array(xp, 0.5, PARAMS) - cp.step_array(xm, 0.5, PARAMS)) / (2 * h)
        B_ref = ((cp.step_array(x_arr, 0.5 + h, PARAMS) - cp.step_array(x_arr, 0.5 - h, PARAMS)) / (2 * h)).reshape(4, 1)
        assert np.max(np.abs(A - A_ref)) / np.max(np.abs(A_ref)) < 1e-4
        assert np.max(np.abs(B - B_ref)) / np.max(np.abs(B_ref)) < 1e-4

    def test_upright_is_open_loop_unstable(self):
        A, _ = cp.linearize(PARAMS, cp.CartpoleState(), 0.0)
        assert np.max(np.abs(np.linalg.eigvals(A))) > 1.0

    def test_force_enters_velocity_rows_first(self):
        _, B = cp.linearize(PARAMS, cp.CartpoleState(), 0.0)
        vel = max(abs(B[1, 0]), abs(B[3, 0]))
        pos = max(abs(B[0, 0]), abs(B[2, 0]))
        assert pos < 0.05 * vel

    def test_first_order_consistency(self):
        x0 = cp.CartpoleState(0.0, 0.0, 0.1, 0.0)
        A, _ = cp.linearize(PARAMS, x0, 0.0)
        base = cp.step_array(x0.as_array(), 0.0, PARAMS)
        rng = np.random.default_rng(2)
        direction = rng.standard_normal(4)
        direction /= np.linalg.norm(direction)
        errs = []
        for mag in (1e-2, 1e-3, 1e-4):
            delta = mag * direction
            pred = base + A @ delta
            actual = cp.step_array(x0.as_array() + delta, 0.0, PARAMS)
            errs.append(np.linalg.norm(cp.state_error(actual, pred)))
        # quadratic remainder: shrinking delta by 10x shrinks error ~100x
        assert errs[1] < 0.02 * errs[0]
        assert errs[2] < 0.02 * errs[1]


class TestDeterminismAndIo:
    def test_bit_identical_trajectories(self):
        noise = cp.NoiseConfig(process_noise_std=0.1)

        def run():
            rng = np.random.default_rng(123)
            s = cp.CartpoleState(0.1, 0.0, 0.2, 0.0)
            out = []
            for _ in range(50):
                s = cp.step_true(s, 0.3, PARAMS, noise, rng)
                out.append(s.as_array())
            return np.array(out)

        assert np.array_equal(run(), run())

    def test_trajectory_csv_roundtrip(self, tmp_path):
        rng = np.random.default_rng(4)
        x = rng.standard_normal((4, 10))
        u = rng.standard_normal(9)
        t = np.arange(10) * cp.DT
        path = tmp_path / "traj.csv"
        cp.write_trajectory_csv(path, t, x, u)
        assert path.read_text().splitlines()[0] == cp.TRAJECTORY_HEADER
        t2, x2, u2 = cp.read_trajectory_csv(path)
        assert np.array_equal(x, x2) and np.array_equal(u, u2) and np.array_equal(t, t2)

    def test_params_config_roundtrip(self):
        text = cp.params_to_config(PARAMS)
        assert cp.params_from_config(text) == PARAMS

    def test_invalid_params_rejected(self):
        with pytest.raises(ValueError):
            cp.CartpoleParams(cart_mass=-1.0)
        with pytest.raises(ValueError):
            cp.CartpoleParams(gravity=0.0)


class TestWrapAngle:
    @pytest.mark.parametrize(
        "raw,expected",
        [(0.0, 0.0), (math.pi, math.pi), (-math.pi, math.pi), (3 * math.pi, math.pi), (math.tau, 0.0)],
    )
    def test_boundary_cases(self, raw, expected):
        assert cp.wrap_angle(raw) == pytest.approx(expected, abs=1e-12)

    def test_range_property(self):
        rng = np.random.default_rng(8)
        for raw in rng.uniform(-50, 50, size=200):
            w = cp.wrap_angle(raw)
            assert -math.pi < w <= math.pi
            assert abs(math.remainder(w - raw, math.tau)) < 1e-9
