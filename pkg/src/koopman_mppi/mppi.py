"""Sampling-based path-integral controller.

Each control step perturbs a nominal input sequence with Gaussian noise,
scores N rollouts under a backend (true dynamics, a linear Koopman surrogate,
or a deliberately slow re-lifting ablation), and moves the nominal toward an
exponentially cost-weighted average of the perturbations.

Rollouts are evaluated in fixed-size chunks whose layout never depends on the
worker-thread count, so per-rollout costs are bitwise reproducible at any
parallelism level.
"""

from __future__ import annotations

import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .koopman import KoopmanModel
from .numerics import (
    NoiseStreamKey,
    covariance_factor,
    pinv,
    savgol_smooth,
    standard_normal_block,
)
from .plants import Plant

WORKERS_ENV_VAR = "KOOPMAN_MPPI_WORKERS"


class ControllerError(RuntimeError):
    """Raised when no rollout produced a finite cost."""


def worker_count() -> int:
    raw = os.environ.get(WORKERS_ENV_VAR, "1")
    try:
        n = int(raw)
    except ValueError:
        raise ValueError(f"{WORKERS_ENV_VAR} must be an integer, got {raw!r}") from None
    return max(1, n)


@dataclass
class MppiConfig:
    """Controller parameters.

    ``temperature`` is the fixed softmax temperature; leave it None to adapt
    it each step as adaptive_coeff * std(rollout costs). The running control
    penalty is either the ``sigma`` form gamma * u' Sigma^-1 eps (gamma
    defaults to the temperature, or 0 when adaptive) or the ``quadratic``
    form 0.5 u'Ru + gamma_u eps'R eps + u'R eps with gamma_u = (nu-1)/(2nu).
    """

    horizon: int
    num_rollouts: int
    sigma: np.ndarray
    temperature: float | None = 0.1
    adaptive_coeff: float = 0.5
    control_cost_weight: float | None = None
    cost_mode: str = "sigma"
    nu: float = 1.0
    control_penalty: np.ndarray | None = None
    input_low: np.ndarray = field(default_factory=lambda: np.array([-1.0]))
    input_high: np.ndarray = field(default_factory=lambda: np.array([1.0]))
    smoothing: bool = False
    smooth_window: int = 9
    smooth_polyorder: int = 3
    terminal_scale: float = 1.0
    warm_start_init: str = "hold"
    chunk_size: int = 256

    def __post_init__(self):
        self.sigma = np.atleast_2d(np.asarray(self.sigma, dtype=np.float64))
        self.input_low = np.asarray(self.input_low, dtype=np.float64)
        self.input_high = np.asarray(self.input_high, dtype=np.float64)
        if self.horizon < 1 or self.num_rollouts < 2:
            raise ValueError("horizon must be >= 1 and num_rollouts >= 2")
        if self.temperature is not None and self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.temperature is None and self.adaptive_coeff <= 0:
            raise ValueError("adaptive_coeff must be positive")
        if self.cost_mode not in ("sigma", "quadratic"):
            raise ValueError("cost_mode must be 'sigma' or 'quadratic'")
        if self.nu < 1.0:
            raise ValueError("nu must be >= 1")
        if self.warm_start_init not in ("hold", "zero"):
            raise ValueError("warm_start_init must be 'hold' or 'zero'")
        if self.chunk_size < 1:
            raise ValueError("chunk_size must be >= 1")

    @property
    def input_dim(self) -> int:
        return self.sigma.shape[0]


def sample_noise(cfg: MppiConfig, step_index: int, master_seed: int) -> np.ndarray:
    """(N, T, m) Gaussian perturbations for one control step.

    Drawn from the counter-based stream keyed by (master_seed, step_index),
    shaped N(0, Sigma) per (rollout, step) slot; identical for identical keys
    no matter how many worker threads later consume it.
    """
    factor = covariance_factor(cfg.sigma)
    key = NoiseStreamKey(master_seed, step_index=step_index)
    z = standard_normal_block(key, (cfg.num_rollouts, cfg.horizon, cfg.input_dim))
    return z @ factor.T


def compute_weights(costs: np.ndarray, temperature: float) -> np.ndarray:
    """Normalized exp(-(S - S_min)/lambda) weights; infinite costs get 0."""
    s = np.asarray(costs, dtype=np.float64)
    finite = np.isfinite(s)
    if not np.any(finite):
        raise ControllerError("all rollout costs are non-finite")
    s_min = np.min(s[finite])
    with np.errstate(over="ignore"):
        w = np.exp(-(s - s_min) / temperature)
    w[~finite] = 0.0
    return w / np.sum(w)


def update_controls(nominal: np.ndarray, noise: np.ndarray, weights: np.ndarray,
                    input_low: np.ndarray, input_high: np.ndarray) -> np.ndarray:
    """nominal + weighted average of perturbations, clamped to bounds."""
    delta = np.einsum("n,ntm->tm", weights, noise)
    return np.clip(nominal + delta, input_low, input_high)


def shift_warm_start(nominal: np.ndarray, init: str = "hold") -> np.ndarray:
    """Drop the executed first input; fill the tail by holding or zeroing."""
    shifted = np.empty_like(nominal)
    shifted[:-1] = nominal[1:]
    shifted[-1] = nominal[-1] if init == "hold" else 0.0
    return shifted


@dataclass
class StepDiagnostics:
    step_index: int
    u0: np.ndarray
    min_cost: float
    mean_cost: float
    temperature: float
    effective_samples: float
    wall_us: float


class _Backend:
    """Scores one chunk of rollouts; subclasses define the propagation."""

    input_dim: int

    def begin_step(self, x_t: np.ndarray) -> None:
        raise NotImplementedError

    def rollout_chunk(self, n_rollouts: int, nominal: np.ndarray, noise: np.ndarray,
                      cfg: MppiConfig) -> tuple[np.ndarray, np.ndarray]:
        raise NotImplementedError

    def _control_costs(self, cfg: MppiConfig, nominal_s: np.ndarray,
                       eps_eff: np.ndarray) -> np.ndarray:
        """Per-rollout running control penalty for one horizon step."""
        if cfg.cost_mode == "sigma":
            return eps_eff @ (self._sigma_inv(cfg) @ nominal_s)
        R = np.eye(cfg.input_dim) if cfg.control_penalty is None else np.atleast_2d(cfg.control_penalty)
        gamma_u = (cfg.nu - 1.0) / (2.0 * cfg.nu)
        u_term = 0.5 * nominal_s @ R @ nominal_s
        cross = eps_eff @ (R @ nominal_s)
        quad = np.einsum("nm,nm->n", eps_eff @ R, eps_eff)
        return u_term + gamma_u * quad + cross

    def _sigma_inv(self, cfg: MppiConfig) -> np.ndarray:
        if not hasattr(self, "_sigma_inv_cache"):
            self._sigma_inv_cache = pinv(cfg.sigma)
        return self._sigma_inv_cache


class TrueDynamicsBackend(_Backend):
    """Classic benchmark: rollouts propagate the plant's own dynamics."""

    def __init__(self, plant: Plant):
        self.plant = plant
        self.input_dim = plant.input_dim
        self._x0: np.ndarray | None = None

    def begin_step(self, x_t):
        self._x0 = np.asarray(x_t, dtype=np.float64)

    def rollout_chunk(self, n_rollouts, nominal, noise, cfg):
        plant = self.plant
        X = np.tile(self._x0, (n_rollouts, 1))
        state_cost = np.zeros(n_rollouts)
        ctrl_cost = np.zeros(n_rollouts)
        for s in range(cfg.horizon):
            v = np.clip(nominal[s] + noise[:, s], cfg.input_low, cfg.input_high)
            X = plant.step(X, v)
            state_cost += plant.stage_cost(X)
            ctrl_cost += self._control_costs(cfg, nominal[s], v - nominal[s])
        state_cost += cfg.terminal_scale * plant.terminal_cost(X)
        state_cost[~np.isfinite(state_cost)] = np.inf
        return state_cost, ctrl_cost


class KoopmanBackend(_Backend):
    """Surrogate rollouts: the lifting runs once per control step and the
    lifted state advances linearly; leftover kinematics (e.g. a vehicle pose)
    ride along through the plant's aux hooks."""

    relift_each_step = False

    def __init__(self, model: KoopmanModel, plant: Plant):
        if model.state_dim != plant.model_dim or model.input_dim != plant.input_dim:
            raise ValueError("model dimensions do not match the plant's model space")
        self.model = model
        self.plant = plant
        self.input_dim = plant.input_dim
        self._z0: np.ndarray | None = None
        self._aux0: np.ndarray | None = None

    def begin_step(self, x_t):
        x_t = np.asarray(x_t, dtype=np.float64)
        self._z0 = self.model.lift(self.plant.model_state(x_t))
        self._aux0 = self.plant.aux_init(x_t)

    def rollout_chunk(self, n_rollouts, nominal, noise, cfg):
        model, plant = self.model, self.plant
        A_T, B_T, C_T = model.A.T, model.B.T, model.C.T
        Z = np.tile(self._z0, (n_rollouts, 1))
        aux = np.tile(self._aux0, (n_rollouts, 1))
        state_cost = np.zeros(n_rollouts)
        ctrl_cost = np.zeros(n_rollouts)
        for s in range(cfg.horizon):
            v = np.clip(nominal[s] + noise[:, s], cfg.input_low, cfg.input_high)
            Z = Z @ A_T + v @ B_T
            dec = Z @ C_T
            aux = plant.aux_step(aux, dec)
            state_cost += plant.model_stage_cost(dec, aux)
            ctrl_cost += self._control_costs(cfg, nominal[s], v - nominal[s])
            if self.relift_each_step:
                Z = model.lift(dec)
        state_cost += cfg.terminal_scale * plant.model_terminal_cost(dec, aux)
        state_cost[~np.isfinite(state_cost)] = np.inf
        return state_cost, ctrl_cost


class ReliftBackend(KoopmanBackend):
    """Ablation of the lifted-propagation trick: after every decoded state the
    lifting network is re-evaluated, costing one network pass per step."""

    relift_each_step = True


def make_backend(kind: str, plant: Plant, model: KoopmanModel | None = None) -> _Backend:
    if kind == "true":
        return TrueDynamicsBackend(plant)
    if kind in ("dk", "relift"):
        if model is None:
            raise ValueError(f"backend {kind!r} requires a Koopman model")
        return (KoopmanBackend if kind == "dk" else ReliftBackend)(model, plant)
    raise ValueError(f"unknown backend {kind!r}; expected 'dk', 'true', or 'relift'")


class MppiController:
    """Receding-horizon MPPI loop with warm-started nominal controls."""

    def __init__(self, cfg: MppiConfig, backend: _Backend, master_seed: int = 0):
        if backend.input_dim != cfg.input_dim:
            raise ValueError("config input dimension does not match backend")
        self.cfg = cfg
        self.backend = backend
        self.master_seed = master_seed
        self.nominal = np.zeros((cfg.horizon, cfg.input_dim))
        self.step_index = 0

    def reset(self, nominal: np.ndarray | None = None) -> None:
        self.step_index = 0
        self.nominal = (np.zeros((self.cfg.horizon, self.cfg.input_dim))
                        if nominal is None else np.array(nominal, dtype=np.float64))

    def rollout_costs(self, x_t: np.ndarray, noise: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Evaluate all rollouts in fixed-size chunks, optionally threaded.

        Chunk boundaries depend only on chunk_size, so the floating-point
        result is identical for any KOOPMAN_MPPI_WORKERS setting.
        """
        cfg = self.cfg
        self.backend.begin_step(np.asarray(x_t, dtype=np.float64))
        n = cfg.num_rollouts
        bounds = [(lo, min(lo + cfg.chunk_size, n)) for lo in range(0, n, cfg.chunk_size)]
        state_cost = np.empty(n)
        ctrl_cost = np.empty(n)

        def run(chunk):
            lo, hi = chunk
            sc, cc = self.backend.rollout_chunk(hi - lo, self.nominal, noise[lo:hi], cfg)
            state_cost[lo:hi] = sc
            ctrl_cost[lo:hi] = cc

        workers = worker_count()
        if workers == 1 or len(bounds) == 1:
            for chunk in bounds:
                run(chunk)
        else:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                list(pool.map(run, bounds))
        return state_cost, ctrl_cost

    def step(self, x_t: np.ndarray) -> tuple[np.ndarray, StepDiagnostics]:
        """One receding-horizon update; returns the input to apply now."""
        t_start = time.perf_counter()
        cfg = self.cfg
        noise = sample_noise(cfg, self.step_index, self.master_seed)
        state_cost, ctrl_cost = self.rollout_costs(x_t, noise)

        gamma = cfg.control_cost_weight
        if cfg.cost_mode == "quadratic":
            costs = state_cost + ctrl_cost
        elif cfg.temperature is not None:
            gamma = cfg.temperature if gamma is None else gamma
            costs = state_cost + gamma * ctrl_cost
        else:
            costs = state_cost + (0.0 if gamma is None else gamma) * ctrl_cost

        if cfg.temperature is not None:
            temperature = cfg.temperature
        else:
            finite = costs[np.isfinite(costs)]
            if finite.size == 0:
                raise ControllerError("all rollout costs are non-finite")
            temperature = max(cfg.adaptive_coeff * float(np.std(finite)), 1e-12)

        weights = compute_weights(costs, temperature)
        updated = update_controls(self.nominal, noise, weights, cfg.input_low, cfg.input_high)
        if cfg.smoothing:
            window = min(cfg.smooth_window, cfg.horizon if cfg.horizon % 2 == 1 else cfg.horizon - 1)
            if window >= 3 and cfg.smooth_polyorder < window:
                updated = np.clip(savgol_smooth(updated, window, cfg.smooth_polyorder),
                                  cfg.input_low, cfg.input_high)
        u0 = updated[0].copy()
        self.nominal = shift_warm_start(updated, cfg.warm_start_init)
        self.step_index += 1
        diag = StepDiagnostics(
            step_index=self.step_index - 1,
            u0=u0,
            min_cost=float(np.min(costs[np.isfinite(costs)])),
            mean_cost=float(np.mean(costs[np.isfinite(costs)])),
            temperature=float(temperature),
            effective_samples=float(1.0 / np.sum(weights ** 2)),
            wall_us=(time.perf_counter() - t_start) * 1e6,
        )
        return u0, diag
