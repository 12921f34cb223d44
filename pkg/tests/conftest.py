"""Shared fixtures: synthetic linear lifted systems and small networks."""

import numpy as np
import pytest

from koopman_mppi.koopman import TransitionDataset
from koopman_mppi.lifting import LiftingArchitecture, lift_init


def random_stable_linear_system(r, m, rng, spectral_radius=0.9):
    """Random (A, B) with the A spectrum scaled inside the unit circle."""
    A = rng.standard_normal((r, r))
    A *= spectral_radius / np.max(np.abs(np.linalg.eigvals(A)))
    B = rng.standard_normal((r, m))
    return A, B


def linear_system_dataset(A, B, num_samples, rng, state_scale=1.0, input_scale=1.0):
    """Transitions x+ = A x + B u sampled i.i.d.; bounds wide enough to pass."""
    r, m = B.shape
    X = rng.uniform(-state_scale, state_scale, size=(num_samples, r))
    U = rng.uniform(-input_scale, input_scale, size=(num_samples, m))
    X_next = X @ A.T + U @ B.T
    big = 10.0 * (state_scale + input_scale) * (1 + np.abs(A).sum() + np.abs(B).sum())
    return TransitionDataset(
        states=X, inputs=U, next_states=X_next,
        state_low=-big * np.ones(r), state_high=big * np.ones(r),
        input_low=-input_scale * np.ones(m), input_high=input_scale * np.ones(m),
    )


@pytest.fixture
def small_arch():
    return LiftingArchitecture(input_dim=2, hidden_sizes=(8, 8), lift_dim=4)


@pytest.fixture
def small_net(small_arch):
    return lift_init(small_arch, seed=7)


def finite_difference_gradient(fn, theta, h=1e-5):
    """Central-difference gradient of a scalar function of a flat vector."""
    grad = np.empty_like(theta)
    for i in range(theta.size):
        up = theta.copy()
        up[i] += h
        down = theta.copy()
        down[i] -= h
        grad[i] = (fn(up) - fn(down)) / (2.0 * h)
    return grad


def min_preactivation_gap(net, x_batch):
    """Smallest |hidden pre-activation| over a batch (ReLU kink distance)."""
    h = np.atleast_2d(np.asarray(x_batch, dtype=np.float64))
    gap = np.inf
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        z = h @ w.T + b
        if i < len(net.weights) - 1:
            gap = min(gap, float(np.min(np.abs(z))))
            h = np.maximum(z, 0.0)
        else:
            h = np.tanh(z)
    return gap
