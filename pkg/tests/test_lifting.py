"""Lifting MLP: init, forward, reverse-mode gradients, Adam, serialization."""

import numpy as np
import pytest

from conftest import finite_difference_gradient, min_preactivation_gap
from koopman_mppi.lifting import (
    AdamState,
    IdentityLifting,
    LiftingArchitecture,
    LiftingNetwork,
    adam_step,
    lift_backward,
    lift_forward,
    lift_init,
    load_lifting,
    network_params,
    save_lifting,
    set_network_params,
)


def one_dim_chain_net():
    """1 -> 1 -> 1 -> 1 network with unit weights and zero biases."""
    arch = LiftingArchitecture(input_dim=1, hidden_sizes=(1, 1), lift_dim=1)
    return LiftingNetwork(arch, [np.ones((1, 1)) for _ in range(3)],
                          [np.zeros(1) for _ in range(3)])


class TestInit:
    def test_deterministic(self, small_arch):
        a = lift_init(small_arch, seed=3)
        b = lift_init(small_arch, seed=3)
        for wa, wb in zip(a.weights, b.weights):
            assert np.array_equal(wa, wb)

    def test_weights_within_glorot_bound(self, small_arch):
        net = lift_init(small_arch, seed=5)
        for w, (fan_out, fan_in) in zip(net.weights, small_arch.layer_shapes):
            s = np.sqrt(6.0 / (fan_in + fan_out))
            assert np.all(np.abs(w) <= s)

    def test_biases_zero(self, small_arch):
        net = lift_init(small_arch, seed=5)
        for b in net.biases:
            assert np.array_equal(b, np.zeros_like(b))

    def test_different_seeds_differ(self, small_arch):
        a = lift_init(small_arch, seed=1)
        b = lift_init(small_arch, seed=2)
        assert any(not np.array_equal(wa, wb) for wa, wb in zip(a.weights, b.weights))

    def test_rejects_lift_smaller_than_input(self):
        with pytest.raises(ValueError):
            LiftingArchitecture(input_dim=4, hidden_sizes=(8,), lift_dim=2)

    def test_rejects_empty_hidden(self):
        with pytest.raises(ValueError):
            LiftingArchitecture(input_dim=2, hidden_sizes=(), lift_dim=4)


class TestForward:
    def test_zero_net_maps_to_zero(self, small_arch):
        net = lift_init(small_arch, seed=0)
        for i in range(len(net.weights)):
            net.weights[i] = np.zeros_like(net.weights[i])
        out = lift_forward(net, np.array([1.0, -2.0]))
        assert np.array_equal(out, np.zeros(4))

    def test_hand_chain_value(self):
        # relu(relu(2)) = 2, tanh(2) = 0.96402758...
        net = one_dim_chain_net()
        out = lift_forward(net, np.array([2.0]))
        assert np.isclose(out[0], np.tanh(2.0), atol=1e-12)

    def test_output_strictly_inside_unit_box(self, small_net):
        rng = np.random.default_rng(8)
        # strict interior on plant-scale inputs; tanh saturates to exactly
        # +-1.0 in float64 only for far larger pre-activations
        x = rng.uniform(-8, 8, size=(200, 2))
        out = lift_forward(small_net, x)
        assert np.all(np.abs(out) < 1.0)
        extreme = lift_forward(small_net, rng.uniform(-1e6, 1e6, size=(50, 2)))
        assert np.all(np.abs(extreme) <= 1.0)

    def test_batch_matches_per_sample(self, small_net):
        rng = np.random.default_rng(9)
        x = rng.standard_normal((6, 2))
        batch = lift_forward(small_net, x)
        single = np.stack([lift_forward(small_net, xi) for xi in x])
        # batched GEMM and per-sample GEMV round differently at the last ulp
        assert np.allclose(batch, single, rtol=0.0, atol=1e-13)

    def test_batch_of_copies_identical_rows(self, small_net):
        x = np.array([0.3, -0.7])
        out = lift_forward(small_net, np.tile(x, (5, 1)))
        assert np.array_equal(out, np.tile(out[0], (5, 1)))

    def test_dimension_mismatch_raises(self, small_net):
        with pytest.raises(ValueError):
            lift_forward(small_net, np.zeros(3))

    def test_append_state_concatenates_raw_input(self):
        arch = LiftingArchitecture(input_dim=2, hidden_sizes=(4,), lift_dim=3, append_state=True)
        net = lift_init(arch, seed=1)
        x = np.array([0.5, -1.5])
        out = lift_forward(net, x)
        assert out.shape == (5,)
        assert np.array_equal(out[3:], x)

    def test_lipschitz_bound(self, small_net):
        # product of layer Frobenius norms bounds the network's Lipschitz constant
        L = np.prod([np.linalg.norm(w) for w in small_net.weights])
        rng = np.random.default_rng(10)
        for _ in range(50):
            x, y = rng.uniform(-3, 3, size=(2, 2))
            gx, gy = lift_forward(small_net, x), lift_forward(small_net, y)
            assert np.linalg.norm(gx - gy) <= L * np.linalg.norm(x - y) + 1e-12


class TestBackward:
    def test_zero_upstream_gives_zero_gradient(self, small_net):
        x = np.random.default_rng(0).standard_normal((4, 2))
        grads = lift_backward(small_net, x, np.zeros((4, 4)))
        assert all(np.array_equal(g, np.zeros_like(g)) for g in grads)

    def test_hand_output_weight_gradient(self):
        # d tanh(w*2)/dw at w=1: 2 * (1 - tanh(2)^2) = 0.14130164...
        net = one_dim_chain_net()
        grads = lift_backward(net, np.array([[2.0]]), np.array([[1.0]]))
        expected = 2.0 * (1.0 - np.tanh(2.0) ** 2)
        assert np.isclose(grads[4][0, 0], expected, atol=1e-12)

    def test_shape_mismatch_raises(self, small_net):
        with pytest.raises(ValueError):
            lift_backward(small_net, np.zeros((3, 2)), np.zeros((3, 5)))

    def test_matches_finite_differences(self, small_arch):
        rng = np.random.default_rng(11)
        checked = 0
        seed = 0
        while checked < 20:
            seed += 1
            net = lift_init(small_arch, seed=seed)
            x = rng.uniform(-2, 2, size=(5, 2))
            if min_preactivation_gap(net, x) < 1e-3:
                continue
            upstream = rng.standard_normal((5, 4))
            analytic = np.concatenate([g.ravel() for g in lift_backward(net, x, upstream)])

            def loss(theta, net=net, x=x, upstream=upstream):
                probe = net.copy()
                probe.set_params_vector(theta)
                return float(np.sum(upstream * lift_forward(probe, x)))

            numeric = finite_difference_gradient(loss, net.params_vector(), h=1e-5)
            denom = max(np.linalg.norm(numeric), 1e-12)
            assert np.linalg.norm(analytic - numeric) / denom <= 1e-4
            checked += 1


class TestAdam:
    def test_zero_gradient_keeps_params(self, small_net):
        state = AdamState.for_network(small_net)
        params = network_params(small_net)
        out = adam_step(state, params, [np.zeros_like(p) for p in params])
        assert all(np.array_equal(a, b) for a, b in zip(out, params))
        assert state.step == 1

    def test_first_step_magnitude_near_alpha(self):
        arch = LiftingArchitecture(input_dim=1, hidden_sizes=(2,), lift_dim=1)
        net = lift_init(arch, seed=0)
        state = AdamState.for_network(net, learning_rate=1e-3)
        params = network_params(net)
        grads = [np.full_like(p, 0.5) for p in params]
        out = adam_step(state, params, grads)
        for before, after in zip(params, out):
            # bias-corrected first step is ~ -alpha * sign(g)
            assert np.allclose(before - after, 1e-3, rtol=1e-4)

    def test_deterministic(self, small_net):
        params = network_params(small_net)
        grads = [np.ones_like(p) * 0.1 for p in params]
        s1 = AdamState.for_network(small_net)
        s2 = AdamState.for_network(small_net)
        o1 = adam_step(s1, params, grads)
        o2 = adam_step(s2, params, grads)
        assert all(np.array_equal(a, b) for a, b in zip(o1, o2))

    def test_nonfinite_gradient_raises(self, small_net):
        state = AdamState.for_network(small_net)
        params = network_params(small_net)
        grads = [np.zeros_like(p) for p in params]
        grads[0] = grads[0] + np.nan
        with pytest.raises(FloatingPointError):
            adam_step(state, params, grads)


class TestSerialization:
    def test_roundtrip_bit_exact(self, small_net, tmp_path):
        path = tmp_path / "net.npz"
        save_lifting(path, small_net)
        loaded = load_lifting(path)
        assert loaded.arch == small_net.arch
        for a, b in zip(loaded.weights, small_net.weights):
            assert np.array_equal(a, b)
        for a, b in zip(loaded.biases, small_net.biases):
            assert np.array_equal(a, b)

    def test_identity_roundtrip(self, tmp_path):
        path = tmp_path / "id.npz"
        save_lifting(path, IdentityLifting(6))
        loaded = load_lifting(path)
        assert isinstance(loaded, IdentityLifting)
        assert loaded.dim == 6

    def test_params_vector_roundtrip(self, small_net):
        theta = small_net.params_vector()
        clone = small_net.copy()
        clone.set_params_vector(theta)
        assert np.array_equal(clone.params_vector(), theta)


class TestEvalCounter:
    def test_forward_increments_once_per_call(self, small_net):
        before = small_net.eval_count
        lift_forward(small_net, np.zeros(2))
        lift_forward(small_net, np.zeros((10, 2)))
        assert small_net.eval_count == before + 2
