"""Controller unit and property tests: noise sampling, weighting, control
updates, warm starts, rollout backends, and parallel determinism."""

import numpy as np
import pytest

from conftest import linear_system_dataset, random_stable_linear_system
from koopman_mppi.koopman import KoopmanModel, build_data_matrices, fit_ABC
from koopman_mppi.lifting import IdentityLifting
from koopman_mppi.mppi import (
    ControllerError,
    KoopmanBackend,
    MppiConfig,
    MppiController,
    ReliftBackend,
    TrueDynamicsBackend,
    compute_weights,
    make_backend,
    sample_noise,
    shift_warm_start,
    update_controls,
)
from koopman_mppi.plants import Pendulum, Plant


class LinearPlant(Plant):
    """Exactly-linear test plant whose model space equals its state space."""

    name = "linear"
    input_dim = 1

    def __init__(self, A, B):
        self.A, self.B = A, B
        self.state_dim = A.shape[0]
        self.input_low = -np.ones(B.shape[1])
        self.input_high = np.ones(B.shape[1])
        self.input_dim = B.shape[1]
        big = 1e6 * np.ones(self.state_dim)
        self.state_low, self.state_high = -big, big

    def step(self, x, u):
        return np.asarray(x) @ self.A.T + np.asarray(u) @ self.B.T

    def stage_cost(self, x):
        return np.sum(np.asarray(x) ** 2, axis=-1)

    def model_stage_cost(self, s, aux):
        return self.stage_cost(s)


def exact_linear_model(rng, r=4, m=1, samples=120):
    A0, B0 = random_stable_linear_system(r, m, rng)
    data = linear_system_dataset(A0, B0, samples, rng)
    lifting = IdentityLifting(r)
    _, U, X_bar, G, G_bar = build_data_matrices(data, lifting)
    A, B, C = fit_ABC(G, G_bar, U, X_bar)
    return KoopmanModel(A, B, C, lifting), LinearPlant(A0, B0)


def small_cfg(**kw):
    defaults = dict(horizon=5, num_rollouts=16, sigma=np.eye(1) * 0.25,
                    temperature=1.0, input_low=np.array([-1.0]),
                    input_high=np.array([1.0]), chunk_size=4)
    defaults.update(kw)
    return MppiConfig(**defaults)


class TestSampleNoise:
    def test_zero_covariance_zero_noise(self):
        cfg = small_cfg(sigma=np.zeros((1, 1)))
        assert np.array_equal(sample_noise(cfg, 0, 42), np.zeros((16, 5, 1)))

    def test_deterministic_per_seed_and_step(self):
        cfg = small_cfg()
        a = sample_noise(cfg, 3, 7)
        b = sample_noise(cfg, 3, 7)
        c = sample_noise(cfg, 4, 7)
        d = sample_noise(cfg, 3, 8)
        assert np.array_equal(a, b)
        assert not np.array_equal(a, c)
        assert not np.array_equal(a, d)

    def test_empirical_variance(self):
        cfg = MppiConfig(horizon=25, num_rollouts=500, sigma=np.diag([0.5, 2.0]),
                         temperature=1.0, input_low=-np.ones(2) * 9, input_high=np.ones(2) * 9)
        eps = sample_noise(cfg, 0, 11)
        var = eps.reshape(-1, 2).var(axis=0)
        assert np.all(np.abs(var - [0.5, 2.0]) <= 0.1 * np.array([0.5, 2.0]))


class TestComputeWeights:
    def test_equal_costs_uniform(self):
        w = compute_weights(np.full(8, 3.0), 0.5)
        assert np.array_equal(w, np.full(8, 1.0 / 8))

    def test_two_point_hand_value(self):
        lam = 0.7
        w = compute_weights(np.array([0.0, lam * np.log(3.0)]), lam)
        assert np.allclose(w, [0.75, 0.25], atol=1e-12)

    def test_shift_invariance_exact(self):
        # dyadic values so the S - S_min subtraction is exact in binary
        s = np.array([0.25, 1.5, 3.0, 0.75])
        for c in (2.0, -4.0, 128.0):
            assert np.array_equal(compute_weights(s + c, 0.5), compute_weights(s, 0.5))

    def test_normalization_and_nonnegativity(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            s = rng.uniform(0, 100, size=32)
            w = compute_weights(s, rng.uniform(0.01, 10))
            assert abs(w.sum() - 1.0) <= 1e-12
            assert np.all(w >= 0)

    def test_high_temperature_approaches_uniform(self):
        s = np.array([1.0, 5.0, 9.0, 2.0])
        w = compute_weights(s, 1e12)
        assert np.max(np.abs(w - 0.25)) <= 1e-11

    def test_low_temperature_concentrates_on_argmin(self):
        s = np.array([4.0, 1.0, 9.0, 2.0])
        w = compute_weights(s, 1e-12)
        assert w[1] == 1.0

    def test_scaling_invariance_exact(self):
        # scaling S and lambda by a power of two cancels exactly
        s = np.array([0.5, 2.0, 5.0])
        assert np.array_equal(compute_weights(4.0 * s, 4.0 * 0.25), compute_weights(s, 0.25))

    def test_infinite_costs_get_zero_weight(self):
        w = compute_weights(np.array([1.0, np.inf, 2.0]), 1.0)
        assert w[1] == 0.0
        assert abs(w.sum() - 1.0) <= 1e-12

    def test_all_infinite_raises(self):
        with pytest.raises(ControllerError):
            compute_weights(np.array([np.inf, np.inf]), 1.0)


class TestUpdateControls:
    def test_degenerate_weight_moves_to_that_rollout(self):
        rng = np.random.default_rng(1)
        nominal = np.zeros((4, 2))
        noise = rng.uniform(-0.5, 0.5, size=(6, 4, 2))
        w = np.zeros(6)
        w[3] = 1.0
        out = update_controls(nominal, noise, w, -np.ones(2), np.ones(2))
        assert np.allclose(out, noise[3], atol=1e-15)

    def test_antisymmetric_noise_cancels(self):
        rng = np.random.default_rng(2)
        half = (rng.integers(-8, 8, size=(4, 3, 1)) / 16.0)  # dyadic noise
        noise = np.concatenate([half, -half], axis=0)
        nominal = np.zeros((3, 1))
        # dyadic weights keep every product and partial sum exact
        out = update_controls(nominal, noise, np.full(8, 0.125), -np.ones(1), np.ones(1))
        assert np.array_equal(out, nominal)

    def test_output_within_bounds(self):
        rng = np.random.default_rng(3)
        nominal = rng.uniform(-1, 1, size=(6, 2))
        noise = rng.uniform(-5, 5, size=(20, 6, 2))
        w = np.full(20, 0.05)
        out = update_controls(nominal, noise, w, -np.ones(2), np.ones(2))
        assert np.all(out >= -1.0) and np.all(out <= 1.0)


class TestShiftWarmStart:
    def test_hold_last(self):
        seq = np.array([[1.0], [2.0], [3.0]])
        assert np.array_equal(shift_warm_start(seq), [[2.0], [3.0], [3.0]])

    def test_constant_unchanged(self):
        seq = np.full((5, 2), 0.3)
        assert np.array_equal(shift_warm_start(seq), seq)

    def test_t_shifts_reach_constant_tail(self):
        seq = np.arange(8, dtype=float)[:, None]
        out = seq
        for _ in range(8):
            out = shift_warm_start(out)
        assert np.array_equal(out, np.full((8, 1), 7.0))

    def test_zero_init_mode(self):
        seq = np.array([[1.0], [2.0], [3.0]])
        assert np.array_equal(shift_warm_start(seq, "zero"), [[2.0], [3.0], [0.0]])


class TestRollouts:
    def test_true_backend_equilibrium_zero_cost(self):
        plant = Pendulum()
        cfg = small_cfg(sigma=np.zeros((1, 1)), input_low=plant.input_low,
                        input_high=plant.input_high)
        controller = MppiController(cfg, TrueDynamicsBackend(plant), master_seed=0)
        noise = sample_noise(cfg, 0, 0)
        state_cost, ctrl_cost = controller.rollout_costs(np.zeros(2), noise)
        # sin(pi) is ~1.2e-16 in float64, so "zero" cost is O(1e-32)
        assert np.all(state_cost <= 1e-30)
        assert np.array_equal(ctrl_cost, np.zeros(16))

    def test_zero_noise_identical_costs(self):
        rng = np.random.default_rng(4)
        model, plant = exact_linear_model(rng)
        cfg = small_cfg()
        controller = MppiController(cfg, KoopmanBackend(model, plant), master_seed=0)
        noise = np.zeros((cfg.num_rollouts, cfg.horizon, 1))
        state_cost, _ = controller.rollout_costs(np.array([0.5, -0.2, 0.1, 0.0]), noise)
        assert np.allclose(state_cost, state_cost[0])

    def test_dk_matches_true_on_exact_linear_model(self):
        rng = np.random.default_rng(5)
        model, plant = exact_linear_model(rng)
        cfg = small_cfg(num_rollouts=32)
        x0 = rng.uniform(-0.5, 0.5, 4)
        noise = sample_noise(cfg, 0, 3)
        dk = MppiController(cfg, KoopmanBackend(model, plant), 0)
        true = MppiController(cfg, TrueDynamicsBackend(plant), 0)
        s_dk, c_dk = dk.rollout_costs(x0, noise)
        s_true, c_true = true.rollout_costs(x0, noise)
        assert np.allclose(s_dk, s_true, atol=1e-8)
        assert np.allclose(c_dk, c_true, atol=1e-12)

    def test_relift_matches_dk_on_exact_linear_model(self):
        rng = np.random.default_rng(6)
        model, plant = exact_linear_model(rng)
        cfg = small_cfg(num_rollouts=32)
        x0 = rng.uniform(-0.5, 0.5, 4)
        noise = sample_noise(cfg, 0, 9)
        dk = MppiController(cfg, KoopmanBackend(model, plant), 0)
        relift = MppiController(cfg, ReliftBackend(model, plant), 0)
        s_dk, _ = dk.rollout_costs(x0, noise)
        s_re, _ = relift.rollout_costs(x0, noise)
        assert np.allclose(s_dk, s_re, atol=1e-8)

    def test_single_rollout_cost_is_trajectory_sum(self):
        plant = Pendulum()
        cfg = small_cfg(num_rollouts=2, sigma=np.zeros((1, 1)), horizon=4,
                        input_low=plant.input_low, input_high=plant.input_high)
        controller = MppiController(cfg, TrueDynamicsBackend(plant), 0)
        controller.nominal = np.full((4, 1), 0.7)
        x0 = np.array([1.0, 0.5])
        noise = np.zeros((2, 4, 1))
        state_cost, _ = controller.rollout_costs(x0, noise)
        x = x0.copy()
        expected = 0.0
        for _ in range(4):
            x = plant.step(x, np.array([0.7]))
            expected += plant.stage_cost(x)
        expected += plant.stage_cost(x)  # terminal = stage at final state
        assert np.allclose(state_cost, expected, atol=1e-10)
        assert np.allclose(state_cost[0], state_cost[1], atol=0)


class TestControllerStep:
    def test_zero_sigma_keeps_nominal(self):
        plant = Pendulum()
        cfg = small_cfg(sigma=np.zeros((1, 1)), input_low=plant.input_low,
                        input_high=plant.input_high)
        controller = MppiController(cfg, TrueDynamicsBackend(plant), 0)
        controller.nominal = np.linspace(-0.5, 0.5, 5)[:, None]
        first = controller.nominal[0].copy()
        second = controller.nominal[1].copy()
        u0, _ = controller.step(np.array([2.0, 0.0]))
        assert np.array_equal(u0, first)
        # after warm-start shift the executed input is dropped
        assert np.array_equal(controller.nominal[0], second)

    def test_deterministic_same_seed(self):
        plant = Pendulum()
        cfg = small_cfg(input_low=plant.input_low, input_high=plant.input_high)
        x = np.array([np.pi, 0.1])
        u1, _ = MppiController(cfg, TrueDynamicsBackend(plant), 5).step(x)
        u2, _ = MppiController(cfg, TrueDynamicsBackend(plant), 5).step(x)
        assert np.array_equal(u1, u2)

    def test_worker_threads_do_not_change_costs(self, monkeypatch):
        rng = np.random.default_rng(7)
        model, plant = exact_linear_model(rng)
        cfg = small_cfg(num_rollouts=64, chunk_size=8)
        x0 = rng.uniform(-0.5, 0.5, 4)
        noise = sample_noise(cfg, 0, 1)
        results = []
        for workers in ("1", "2", "8"):
            monkeypatch.setenv("KOOPMAN_MPPI_WORKERS", workers)
            controller = MppiController(cfg, KoopmanBackend(model, plant), 0)
            s, c = controller.rollout_costs(x0, noise)
            results.append((s.copy(), c.copy()))
        for s, c in results[1:]:
            assert np.array_equal(s, results[0][0])
            assert np.array_equal(c, results[0][1])

    def test_dk_backend_lifts_once_per_step(self):
        rng = np.random.default_rng(8)
        model, plant = exact_linear_model(rng)
        cfg = small_cfg(num_rollouts=128, horizon=17, chunk_size=16)
        controller = MppiController(cfg, KoopmanBackend(model, plant), 0)
        before = model.lifting.eval_count
        controller.step(np.zeros(4))
        assert model.lifting.eval_count == before + 1

    def test_relift_backend_lifts_every_step(self):
        rng = np.random.default_rng(9)
        model, plant = exact_linear_model(rng)
        cfg = small_cfg(num_rollouts=8, horizon=6, chunk_size=8)
        controller = MppiController(cfg, ReliftBackend(model, plant), 0)
        before = model.lifting.eval_count
        controller.step(np.zeros(4))
        assert model.lifting.eval_count == before + 1 + 6  # initial lift + one per step

    def test_adaptive_temperature_uses_cost_std(self):
        rng = np.random.default_rng(10)
        model, plant = exact_linear_model(rng)
        cfg = small_cfg(temperature=None, adaptive_coeff=0.5, num_rollouts=64)
        controller = MppiController(cfg, KoopmanBackend(model, plant), 3)
        noise = sample_noise(cfg, 0, 3)
        state_cost, _ = controller.rollout_costs(rng.uniform(-0.5, 0.5, 4), noise)
        controller2 = MppiController(cfg, KoopmanBackend(model, plant), 3)
        _, diag = controller2.step(rng.uniform(-0.5, 0.5, 4))
        assert diag.temperature > 0

    def test_effective_sample_size_bounds(self):
        plant = Pendulum()
        cfg = small_cfg(input_low=plant.input_low, input_high=plant.input_high)
        controller = MppiController(cfg, TrueDynamicsBackend(plant), 2)
        _, diag = controller.step(np.array([1.0, 0.0]))
        assert 1.0 <= diag.effective_samples <= cfg.num_rollouts + 1e-9

    def test_smoothing_keeps_bounds(self):
        plant = Pendulum()
        cfg = small_cfg(horizon=9, smoothing=True, smooth_window=5, smooth_polyorder=2,
                        input_low=plant.input_low, input_high=plant.input_high)
        controller = MppiController(cfg, TrueDynamicsBackend(plant), 4)
        for _ in range(3):
            u0, _ = controller.step(np.array([np.pi, 0.0]))
        assert np.all(controller.nominal >= plant.input_low)
        assert np.all(controller.nominal <= plant.input_high)

    def test_quadratic_cost_mode_runs(self):
        plant = Pendulum()
        cfg = small_cfg(cost_mode="quadratic", nu=2.0,
                        input_low=plant.input_low, input_high=plant.input_high)
        controller = MppiController(cfg, TrueDynamicsBackend(plant), 6)
        u0, diag = controller.step(np.array([np.pi, 0.1]))
        assert np.isfinite(diag.min_cost)

    def test_backend_factory_validation(self):
        plant = Pendulum()
        with pytest.raises(ValueError):
            make_backend("dk", plant, None)
        with pytest.raises(ValueError):
            make_backend("mystery", plant, None)


class TestQuadraticControlCost:
    def test_hand_value_single_step(self):
        rng = np.random.default_rng(11)
        model, plant = exact_linear_model(rng, r=3, m=2)
        nu = 3.0
        cfg = MppiConfig(horizon=1, num_rollouts=2, sigma=np.eye(2), temperature=1.0,
                         cost_mode="quadratic", nu=nu,
                         input_low=-5 * np.ones(2), input_high=5 * np.ones(2))
        backend = KoopmanBackend(model, plant)
        controller = MppiController(cfg, backend, 0)
        controller.nominal = np.array([[0.3, -0.2]])
        noise = np.array([[[0.1, 0.4]], [[-0.3, 0.2]]])
        _, ctrl = controller.rollout_costs(np.zeros(3), noise)
        gamma_u = (nu - 1) / (2 * nu)
        for n in range(2):
            u = controller.nominal[0]
            eps = noise[n, 0]
            expected = 0.5 * u @ u + gamma_u * eps @ eps + u @ eps
            assert np.isclose(ctrl[n], expected, atol=1e-12)
