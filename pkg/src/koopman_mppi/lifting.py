"""Neural lifting functions: an MLP mapping states to a bounded lifted space,
with hand-rolled reverse-mode gradients and an Adam optimizer.

The network is ReLU hidden layers followed by a Tanh output layer, so every
lifted coordinate lies in (-1, 1) and the map is Lipschitz. Gradients are
taken with respect to the flat parameter vector; ReLU's subgradient at 0 is 0
so results are deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numerics import require_finite


@dataclass(frozen=True)
class LiftingArchitecture:
    """Shape of the lifting MLP: input_dim -> hidden_sizes (ReLU) -> lift_dim (Tanh).

    With ``append_state`` the raw state is concatenated to the network output,
    making the effective lifted dimension ``lift_dim + input_dim``.
    """

    input_dim: int
    hidden_sizes: tuple[int, ...]
    lift_dim: int
    append_state: bool = False

    def __post_init__(self):
        if self.input_dim < 1 or self.lift_dim < 1:
            raise ValueError("input_dim and lift_dim must be positive")
        if len(self.hidden_sizes) == 0 or any(h < 1 for h in self.hidden_sizes):
            raise ValueError("hidden_sizes must be nonempty positive counts")
        if self.output_dim < self.input_dim:
            raise ValueError("lifted dimension must be >= input_dim")
        object.__setattr__(self, "hidden_sizes", tuple(int(h) for h in self.hidden_sizes))

    @property
    def output_dim(self) -> int:
        return self.lift_dim + (self.input_dim if self.append_state else 0)

    @property
    def layer_shapes(self) -> list[tuple[int, int]]:
        dims = [self.input_dim, *self.hidden_sizes, self.lift_dim]
        return [(dims[i + 1], dims[i]) for i in range(len(dims) - 1)]


class IdentityLifting:
    """Degenerate lifting g(x) = x, useful as an exactly-linear oracle."""

    def __init__(self, dim: int):
        self.dim = dim
        self.eval_count = 0

    @property
    def output_dim(self) -> int:
        return self.dim

    @property
    def input_dim(self) -> int:
        return self.dim

    def __call__(self, x: np.ndarray) -> np.ndarray:
        self.eval_count += 1
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.dim:
            raise ValueError(f"expected state dimension {self.dim}, got {x.shape[-1]}")
        return x.copy()


class LiftingNetwork:
    """MLP lifting function with explicit weight/bias arrays per layer.

    ``weights[i]`` has shape (fan_out, fan_in); forward for a batch X (B, n)
    computes relu chains then tanh: every output component is in (-1, 1).
    Inputs are first shifted/scaled by the (non-trainable) ``input_offset``
    and ``input_scale`` constants, identity by default. ``eval_count``
    tallies forward invocations (a cheap diagnostic used to check that
    rollouts lift only once).
    """

    def __init__(self, arch: LiftingArchitecture, weights: list[np.ndarray],
                 biases: list[np.ndarray], input_offset: np.ndarray | None = None,
                 input_scale: np.ndarray | None = None):
        shapes = arch.layer_shapes
        if len(weights) != len(shapes) or len(biases) != len(shapes):
            raise ValueError("wrong number of layers")
        for (w, b, shape) in zip(weights, biases, shapes):
            if w.shape != shape or b.shape != (shape[0],):
                raise ValueError(f"layer shape mismatch: {w.shape} vs {shape}")
            require_finite(w, "weights")
            require_finite(b, "biases")
        self.arch = arch
        self.weights = weights
        self.biases = biases
        n = arch.input_dim
        self.input_offset = (np.zeros(n) if input_offset is None
                             else require_finite(input_offset, "input_offset"))
        self.input_scale = (np.ones(n) if input_scale is None
                            else require_finite(input_scale, "input_scale"))
        if self.input_offset.shape != (n,) or self.input_scale.shape != (n,):
            raise ValueError("normalization constants must have the input dimension")
        if np.any(self.input_scale <= 0):
            raise ValueError("input_scale entries must be positive")
        self.eval_count = 0

    @property
    def input_dim(self) -> int:
        return self.arch.input_dim

    @property
    def output_dim(self) -> int:
        return self.arch.output_dim

    @property
    def num_params(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def params_vector(self) -> np.ndarray:
        """Flattened copy of all parameters, layer by layer, weights then bias."""
        return np.concatenate([np.concatenate([w.ravel(), b]) for w, b in zip(self.weights, self.biases)])

    def set_params_vector(self, theta: np.ndarray) -> None:
        theta = require_finite(theta, "theta")
        if theta.size != self.num_params:
            raise ValueError("parameter vector has wrong length")
        pos = 0
        for i, w in enumerate(self.weights):
            self.weights[i] = theta[pos:pos + w.size].reshape(w.shape).copy()
            pos += w.size
            b = self.biases[i]
            self.biases[i] = theta[pos:pos + b.size].copy()
            pos += b.size

    def copy(self) -> "LiftingNetwork":
        return LiftingNetwork(self.arch, [w.copy() for w in self.weights],
                              [b.copy() for b in self.biases],
                              self.input_offset.copy(), self.input_scale.copy())

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return lift_forward(self, x)


def lift_init(arch: LiftingArchitecture, seed: int, input_offset: np.ndarray | None = None,
              input_scale: np.ndarray | None = None) -> LiftingNetwork:
    """Glorot-uniform weights (zero biases), deterministic for a fixed seed."""
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for (fan_out, fan_in) in arch.layer_shapes:
        s = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-s, s, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return LiftingNetwork(arch, weights, biases, input_offset, input_scale)


def _forward_cached(net: LiftingNetwork, x: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
    """Forward pass keeping post-activation values for backprop.

    Returns (output, activations) where activations[0] is the input batch and
    activations[-1] is the tanh output (network part only, before any
    append_state concatenation).
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != net.arch.input_dim:
        raise ValueError(f"expected input dimension {net.arch.input_dim}, got {x.shape[-1]}")
    batch = (np.atleast_2d(x) - net.input_offset) / net.input_scale
    acts = [batch]
    h = batch
    last = len(net.weights) - 1
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        z = h @ w.T + b
        h = np.tanh(z) if i == last else np.maximum(z, 0.0)
        acts.append(h)
    net.eval_count += 1
    return h, acts


def lift_forward(net: LiftingNetwork, x: np.ndarray) -> np.ndarray:
    """Evaluate g(x). Accepts a single state (n,) or a batch (B, n)."""
    out, _ = _forward_cached(net, x)
    if net.arch.append_state:
        out = np.concatenate([out, np.atleast_2d(np.asarray(x, dtype=np.float64))], axis=1)
    return out[0] if np.asarray(x).ndim == 1 else out


def lift_backward(
    net: LiftingNetwork,
    x_batch: np.ndarray,
    upstream_grad: np.ndarray,
    cache: list[np.ndarray] | None = None,
) -> list[np.ndarray]:
    """Gradient of sum_i <upstream_grad_i, g(x_i)> w.r.t. the parameters.

    Returns per-array gradients in params_vector order
    [dW1, db1, dW2, db2, ...]. Passing the ``cache`` from a previous
    ``_forward_cached`` call on the same batch skips the re-forward.
    """
    x_batch = np.atleast_2d(np.asarray(x_batch, dtype=np.float64))
    upstream = np.atleast_2d(np.asarray(upstream_grad, dtype=np.float64))
    if cache is None:
        _, cache = _forward_cached(net, x_batch)
    if net.arch.append_state:
        upstream = upstream[:, : net.arch.lift_dim]
    if upstream.shape != cache[-1].shape:
        raise ValueError(f"upstream gradient shape {upstream.shape} does not match output {cache[-1].shape}")
    grads: list[np.ndarray] = [np.empty(0)] * (2 * len(net.weights))
    delta = upstream * (1.0 - cache[-1] ** 2)
    for i in range(len(net.weights) - 1, -1, -1):
        grads[2 * i] = delta.T @ cache[i]
        grads[2 * i + 1] = delta.sum(axis=0)
        if i > 0:
            delta = (delta @ net.weights[i]) * (cache[i] > 0.0)
    return grads


@dataclass
class AdamState:
    """Adam accumulators shaped like the parameter arrays they update."""

    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def for_network(cls, net: LiftingNetwork, learning_rate: float = 1e-3,
                    beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> "AdamState":
        arrays = [a for w, b in zip(net.weights, net.biases) for a in (w, b)]
        return cls(learning_rate, beta1, beta2, eps, 0,
                   [np.zeros_like(a) for a in arrays], [np.zeros_like(a) for a in arrays])


def adam_step(state: AdamState, params: list[np.ndarray], grads: list[np.ndarray]) -> list[np.ndarray]:
    """One bias-corrected Adam update. Mutates ``state``, returns new params."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("params/grads/state length mismatch")
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise FloatingPointError("non-finite gradient in Adam update")
    state.step += 1
    bc1 = 1.0 - state.beta1 ** state.step
    bc2 = 1.0 - state.beta2 ** state.step
    out = []
    for i, (p, g) in enumerate(zip(params, grads)):
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g
        m_hat = state.m[i] / bc1
        v_hat = state.v[i] / bc2
        out.append(p - state.learning_rate * m_hat / (np.sqrt(v_hat) + state.eps))
    return out


def network_params(net: LiftingNetwork) -> list[np.ndarray]:
    """Parameter arrays in the order used by adam_step / lift_backward."""
    return [a for w, b in zip(net.weights, net.biases) for a in (w, b)]


def set_network_params(net: LiftingNetwork, params: list[np.ndarray]) -> None:
    for i in range(len(net.weights)):
        net.weights[i] = params[2 * i]
        net.biases[i] = params[2 * i + 1]


def save_lifting(path, lifting: LiftingNetwork | IdentityLifting) -> None:
    """Write a lifting function to an .npz archive (bit-exact round trip)."""
    if isinstance(lifting, IdentityLifting):
        np.savez(path, kind="identity", dim=np.int64(lifting.dim))
        return
    arch = lifting.arch
    payload = {
        "kind": "mlp",
        "input_dim": np.int64(arch.input_dim),
        "hidden_sizes": np.asarray(arch.hidden_sizes, dtype=np.int64),
        "lift_dim": np.int64(arch.lift_dim),
        "append_state": np.bool_(arch.append_state),
        "input_offset": lifting.input_offset,
        "input_scale": lifting.input_scale,
    }
    for i, (w, b) in enumerate(zip(lifting.weights, lifting.biases)):
        payload[f"W{i}"] = w
        payload[f"b{i}"] = b
    np.savez(path, **payload)


def load_lifting(path) -> LiftingNetwork | IdentityLifting:
    with np.load(path) as data:
        kind = str(data["kind"])
        if kind == "identity":
            return IdentityLifting(int(data["dim"]))
        arch = LiftingArchitecture(
            input_dim=int(data["input_dim"]),
            hidden_sizes=tuple(int(h) for h in data["hidden_sizes"]),
            lift_dim=int(data["lift_dim"]),
            append_state=bool(data["append_state"]),
        )
        n_layers = len(arch.layer_shapes)
        weights = [data[f"W{i}"].copy() for i in range(n_layers)]
        biases = [data[f"b{i}"].copy() for i in range(n_layers)]
        offset = data["input_offset"].copy()
        scale = data["input_scale"].copy()
    return LiftingNetwork(arch, weights, biases, offset, scale)
