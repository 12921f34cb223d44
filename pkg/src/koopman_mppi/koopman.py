"""Deep Koopman operator learning.

Fits a linear surrogate z+ = A z + B u, x = C z in a learned lifted space:
the lifting network is trained by gradient descent while (A, B, C) are
re-solved in closed form from stacked data matrices via the pseudoinverse.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np

from .lifting import (
    AdamState,
    IdentityLifting,
    LiftingArchitecture,
    LiftingNetwork,
    _forward_cached,
    adam_step,
    lift_backward,
    lift_forward,
    lift_init,
    load_lifting,
    network_params,
    save_lifting,
    set_network_params,
)
from .numerics import pinv_with_rank, require_finite

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    """Raised when model fitting diverges (non-finite loss or gradients)."""


@dataclass
class TransitionDataset:
    """Unordered (x, u, x_next) tuples with declared state/input boxes."""

    states: np.ndarray        # (M, n)
    inputs: np.ndarray        # (M, m)
    next_states: np.ndarray   # (M, n)
    state_low: np.ndarray
    state_high: np.ndarray
    input_low: np.ndarray
    input_high: np.ndarray

    def __post_init__(self):
        self.states = require_finite(self.states, "states")
        self.inputs = require_finite(self.inputs, "inputs")
        self.next_states = require_finite(self.next_states, "next_states")
        if self.states.ndim != 2 or self.inputs.ndim != 2 or self.next_states.shape != self.states.shape:
            raise ValueError("states/inputs/next_states must be 2-D with matching sample counts")
        if len(self.inputs) != len(self.states):
            raise ValueError("states and inputs must have the same number of samples")
        for name in ("state_low", "state_high", "input_low", "input_high"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        eps = 1e-9
        if np.any(self.states < self.state_low - eps) or np.any(self.states > self.state_high + eps):
            raise ValueError("states outside declared bounds")
        if np.any(self.inputs < self.input_low - eps) or np.any(self.inputs > self.input_high + eps):
            raise ValueError("inputs outside declared bounds")

    def __len__(self) -> int:
        return len(self.states)

    @property
    def state_dim(self) -> int:
        return self.states.shape[1]

    @property
    def input_dim(self) -> int:
        return self.inputs.shape[1]

    def subset(self, idx: np.ndarray) -> "TransitionDataset":
        return TransitionDataset(self.states[idx], self.inputs[idx], self.next_states[idx],
                                 self.state_low, self.state_high, self.input_low, self.input_high)


@dataclass
class KoopmanModel:
    """Learned surrogate: x+ = C (A g(x) + B u)."""

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    lifting: LiftingNetwork | IdentityLifting

    def __post_init__(self):
        r = self.lifting.output_dim
        n = self.lifting.input_dim
        if self.A.shape != (r, r) or self.B.shape[0] != r or self.C.shape != (n, r):
            raise ValueError("A/B/C dimensions inconsistent with the lifting function")
        for name in ("A", "B", "C"):
            require_finite(getattr(self, name), name)

    @property
    def lift_dim(self) -> int:
        return self.lifting.output_dim

    @property
    def state_dim(self) -> int:
        return self.lifting.input_dim

    @property
    def input_dim(self) -> int:
        return self.B.shape[1]

    def lift(self, x: np.ndarray) -> np.ndarray:
        return self.lifting(x) if isinstance(self.lifting, IdentityLifting) else lift_forward(self.lifting, x)


@dataclass
class DkoTrainConfig:
    """Training-loop knobs: epochs, minibatching, Adam, validation split."""

    epochs: int = 40
    minibatch_size: int = 512
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    val_fraction: float = 0.1
    refit_cadence: int = 1
    normalize_inputs: bool = False

    def __post_init__(self):
        if not (0.0 < self.val_fraction < 1.0):
            raise ValueError("val_fraction must be in (0, 1)")
        if self.epochs < 0 or self.minibatch_size < 1 or self.refit_cadence < 1:
            raise ValueError("epochs must be >= 0; minibatch_size and refit_cadence >= 1")


def build_data_matrices(data: TransitionDataset, lifting) -> tuple[np.ndarray, ...]:
    """Columnwise data matrices (X, U, X_bar, G, G_bar); column i is tuple i."""
    if len(data) == 0:
        raise ValueError("dataset is empty")
    X = data.states.T
    U = data.inputs.T
    X_bar = data.next_states.T
    lift = lifting if isinstance(lifting, IdentityLifting) else (lambda x: lift_forward(lifting, x))
    G = lift(data.states).T
    G_bar = lift(data.next_states).T
    return X, U, X_bar, G, G_bar


def fit_ABC(G: np.ndarray, G_bar: np.ndarray, U: np.ndarray,
            X_bar: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Closed-form least-squares [A B] = G_bar [G; U]+ and C = X_bar G_bar+.

    Rank-deficient stacks degrade gracefully through the truncated
    pseudoinverse; truncation is logged, not fatal.
    """
    r, M = G.shape
    m = U.shape[0]
    stacked = np.vstack([G, U])
    stacked_pinv, rank = pinv_with_rank(stacked)
    if rank < r + m:
        log.warning("lifted/input stack is rank deficient (%d < %d); pseudoinverse truncated", rank, r + m)
    AB = G_bar @ stacked_pinv
    gbar_pinv, rank_gbar = pinv_with_rank(G_bar)
    if rank_gbar < r:
        log.warning("lifted next-state matrix is rank deficient (%d < %d)", rank_gbar, r)
    C = X_bar @ gbar_pinv
    return AB[:, :r], AB[:, r:], C


def loss_value(model: KoopmanModel, data: TransitionDataset) -> float:
    """Mean prediction-plus-reconstruction loss over the dataset.

    (1/2M) sum_i ||g(x_i+) - A g(x_i) - B u_i||^2 + ||x_i+ - C g(x_i+)||^2.
    """
    G = model.lift(data.states)
    G_bar = model.lift(data.next_states)
    pred_res = G_bar - G @ model.A.T - data.inputs @ model.B.T
    rec_res = data.next_states - G_bar @ model.C.T
    M = len(data)
    return float((np.sum(pred_res ** 2) + np.sum(rec_res ** 2)) / (2.0 * M))


def grad_theta(model: KoopmanModel, data: TransitionDataset) -> list[np.ndarray]:
    """Gradient of the loss w.r.t. network parameters, holding A, B, C fixed.

    Each tuple routes its prediction residual e back through both lifts
    (+e - C' d via g(x+), -A' e via g(x)) and the reconstruction residual d
    through g(x+) only.
    """
    net = model.lifting
    if isinstance(net, IdentityLifting):
        raise ValueError("identity lifting has no trainable parameters")
    G, cache_x = _forward_cached(net, data.states)
    G_bar, cache_xb = _forward_cached(net, data.next_states)
    if net.arch.append_state:
        G = np.concatenate([G, data.states], axis=1)
        G_bar = np.concatenate([G_bar, data.next_states], axis=1)
    pred_res = G_bar - G @ model.A.T - data.inputs @ model.B.T
    rec_res = data.next_states - G_bar @ model.C.T
    M = len(data)
    up_next = (pred_res - rec_res @ model.C) / M
    up_cur = -(pred_res @ model.A) / M
    g_next = lift_backward(net, data.next_states, up_next, cache=cache_xb)
    g_cur = lift_backward(net, data.states, up_cur, cache=cache_x)
    return [a + b for a, b in zip(g_next, g_cur)]


def predict_one_step(model: KoopmanModel, x: np.ndarray, v: np.ndarray) -> np.ndarray:
    """x+ = C (A g(x) + B v); accepts a single state or a batch."""
    g = model.lift(x)
    v = np.asarray(v, dtype=np.float64)
    z_next = g @ model.A.T + v @ model.B.T
    return z_next @ model.C.T


def rollout_lifted(model: KoopmanModel, x0: np.ndarray, inputs: np.ndarray) -> np.ndarray:
    """Predict T steps by propagating the lifted state linearly.

    The lifting function is evaluated exactly once (on x0); subsequent steps
    advance z = A z + B v and decode through C.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    inputs = np.atleast_2d(np.asarray(inputs, dtype=np.float64))
    z = model.lift(x0)
    out = np.empty((len(inputs), model.state_dim))
    for s, v in enumerate(inputs):
        z = model.A @ z + model.B @ v
        out[s] = model.C @ z
    return out


def one_step_rmse(model: KoopmanModel, data: TransitionDataset) -> float:
    """sqrt(mean_i ||x_i+ - prediction_i||^2), the validation metric."""
    pred = predict_one_step(model, data.states, data.inputs)
    return float(np.sqrt(np.mean(np.sum((pred - data.next_states) ** 2, axis=1))))


@dataclass
class TrainLog:
    epochs: list[int] = field(default_factory=list)
    train_loss: list[float] = field(default_factory=list)
    val_rmse: list[float] = field(default_factory=list)

    def rows(self):
        return zip(self.epochs, self.train_loss, self.val_rmse)


def _refit(lifting, train: TransitionDataset) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    X, U, X_bar, G, G_bar = build_data_matrices(train, lifting)
    return fit_ABC(G, G_bar, U, X_bar)


def train_dko(
    data: TransitionDataset,
    lifting_spec: LiftingArchitecture | IdentityLifting,
    cfg: DkoTrainConfig,
    seed: int,
) -> tuple[KoopmanModel, TrainLog]:
    """Alternating training: Adam sweeps on the lifting network between
    closed-form refits of (A, B, C); returns the model after a final refit on
    the full dataset, plus per-epoch train loss / validation one-step RMSE.

    An IdentityLifting spec has no trainable parameters, so epochs reduce to
    logging the closed-form fit. Deterministic for fixed inputs and seed.
    """
    if lifting_spec.input_dim != data.state_dim:
        raise ValueError("lifting input_dim does not match dataset state dimension")
    rng = np.random.default_rng(seed)
    trainable = isinstance(lifting_spec, LiftingArchitecture)
    if trainable and cfg.normalize_inputs:
        offset = data.states.mean(axis=0)
        scale = np.maximum(data.states.std(axis=0), 1e-6)
        net = lift_init(lifting_spec, seed, offset, scale)
    elif trainable:
        net = lift_init(lifting_spec, seed)
    else:
        net = lifting_spec

    M = len(data)
    n_val = max(1, int(round(cfg.val_fraction * M))) if M > 1 else 0
    perm = rng.permutation(M)
    val_idx, train_idx = perm[:n_val], perm[n_val:]
    if len(train_idx) == 0:
        raise ValueError("validation split leaves no training samples")
    train, val = data.subset(train_idx), data.subset(val_idx)
    if len(train) < lifting_spec.output_dim + data.input_dim:
        raise ValueError("need at least lift_dim + input_dim training samples")

    adam = AdamState.for_network(net, cfg.learning_rate, cfg.beta1, cfg.beta2,
                                 cfg.adam_eps) if trainable else None
    history = TrainLog()
    model: KoopmanModel | None = None

    for epoch in range(cfg.epochs):
        if model is None or epoch % cfg.refit_cadence == 0:
            A, B, C = _refit(net, train)
            model = KoopmanModel(A, B, C, net)
        if trainable:
            order = rng.permutation(len(train))
            for start in range(0, len(order), cfg.minibatch_size):
                batch = train.subset(order[start:start + cfg.minibatch_size])
                grads = grad_theta(model, batch)
                try:
                    new_params = adam_step(adam, network_params(net), grads)
                except FloatingPointError as exc:
                    raise TrainingError(f"epoch {epoch}: {exc}") from exc
                set_network_params(net, new_params)
        tl = loss_value(model, train)
        vr = one_step_rmse(model, val) if len(val) else float("nan")
        if not np.isfinite(tl):
            raise TrainingError(f"training loss diverged at epoch {epoch}")
        history.epochs.append(epoch)
        history.train_loss.append(tl)
        history.val_rmse.append(vr)

    A, B, C = _refit(net, data)
    return KoopmanModel(A, B, C, net), history


# ---------------------------------------------------------------------------
# File formats


def save_dataset(path, data: TransitionDataset) -> None:
    """One CSV record per tuple (x, u, x_next) under a JSON header line."""
    header = {
        "n": data.state_dim,
        "m": data.input_dim,
        "state_low": data.state_low.tolist(),
        "state_high": data.state_high.tolist(),
        "input_low": data.input_low.tolist(),
        "input_high": data.input_high.tolist(),
    }
    with open(path, "w") as fh:
        fh.write("# " + json.dumps(header) + "\n")
        cols = [f"x{i}" for i in range(data.state_dim)]
        cols += [f"u{i}" for i in range(data.input_dim)]
        cols += [f"x_next{i}" for i in range(data.state_dim)]
        fh.write(",".join(cols) + "\n")
        for x, u, xn in zip(data.states, data.inputs, data.next_states):
            fh.write(",".join(repr(float(v)) for v in (*x, *u, *xn)) + "\n")


def load_dataset(path) -> TransitionDataset:
    with open(path) as fh:
        header = json.loads(fh.readline().lstrip("# "))
        fh.readline()
        rows = np.array([[float(v) for v in line.split(",")] for line in fh if line.strip()])
    n, m = header["n"], header["m"]
    if rows.size == 0:
        rows = rows.reshape(0, 2 * n + m)
    return TransitionDataset(
        states=rows[:, :n],
        inputs=rows[:, n:n + m],
        next_states=rows[:, n + m:],
        state_low=np.array(header["state_low"]),
        state_high=np.array(header["state_high"]),
        input_low=np.array(header["input_low"]),
        input_high=np.array(header["input_high"]),
    )


def save_model(path, model: KoopmanModel) -> None:
    """npz archive: lifting descriptor + parameters + A, B, C (bit-exact)."""
    payload = {"A": model.A, "B": model.B, "C": model.C}
    lifting = model.lifting
    if isinstance(lifting, IdentityLifting):
        payload["kind"] = "identity"
        payload["dim"] = np.int64(lifting.dim)
    else:
        arch = lifting.arch
        payload.update(
            kind="mlp",
            input_dim=np.int64(arch.input_dim),
            hidden_sizes=np.asarray(arch.hidden_sizes, dtype=np.int64),
            lift_dim=np.int64(arch.lift_dim),
            append_state=np.bool_(arch.append_state),
            input_offset=lifting.input_offset,
            input_scale=lifting.input_scale,
        )
        for i, (w, b) in enumerate(zip(lifting.weights, lifting.biases)):
            payload[f"W{i}"] = w
            payload[f"b{i}"] = b
    np.savez(path, **payload)


def load_model(path) -> KoopmanModel:
    with np.load(path) as data:
        kind = str(data["kind"])
        if kind == "identity":
            lifting: LiftingNetwork | IdentityLifting = IdentityLifting(int(data["dim"]))
        else:
            arch = LiftingArchitecture(
                input_dim=int(data["input_dim"]),
                hidden_sizes=tuple(int(h) for h in data["hidden_sizes"]),
                lift_dim=int(data["lift_dim"]),
                append_state=bool(data["append_state"]),
            )
            n_layers = len(arch.layer_shapes)
            lifting = LiftingNetwork(arch, [data[f"W{i}"].copy() for i in range(n_layers)],
                                     [data[f"b{i}"].copy() for i in range(n_layers)],
                                     data["input_offset"].copy(), data["input_scale"].copy())
        return KoopmanModel(data["A"].copy(), data["B"].copy(), data["C"].copy(), lifting)
