"""Experiment orchestration: config files, data collection, training,
closed-loop evaluation, and timing benchmarks.

Configs are YAML dictionaries merged over per-plant defaults; every command
writes the effective config beside its outputs so any run can be replayed
exactly. Episode records are plain CSV with a header row; summaries are JSON.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import yaml

from .koopman import (
    DkoTrainConfig,
    KoopmanModel,
    TrainLog,
    load_dataset,
    load_model,
    one_step_rmse,
    save_dataset,
    save_model,
    train_dko,
)
from .lifting import IdentityLifting, LiftingArchitecture
from .mppi import ControllerError, MppiConfig, MppiController, make_backend
from .plants import (
    Boat,
    BoatParams,
    Pendulum,
    PendulumParams,
    Plant,
    Quadruped,
    QuadrupedParams,
    collect_dataset,
    default_boat_matrix,
)

DEFAULTS: dict = {
    "pendulum": {
        "plant": "pendulum",
        "pendulum": {"gravity": 10.0, "mass": 1.0, "length": 1.0, "dt": 0.05,
                     "max_speed": 8.0, "max_torque": 2.0, "wrap_theta": True},
        "collect": {"num_samples": 20000, "episode_length": 50, "seed": 0,
                    "unwrap_angles": True},
        "lifting": {"kind": "mlp", "hidden": [64, 64], "lift_dim": 4, "append_state": False},
        "train": {"epochs": 40, "minibatch_size": 512, "learning_rate": 1e-3,
                  "beta1": 0.9, "beta2": 0.999, "adam_eps": 1e-8,
                  "val_fraction": 0.1, "refit_cadence": 1, "seed": 0, "normalize_inputs": True},
        "mppi": {"horizon": 20, "num_rollouts": 2000, "sigma": 1.0, "temperature": 0.1,
                 "adaptive": False, "adaptive_coeff": 0.5, "control_cost_weight": None,
                 "cost_mode": "sigma", "nu": 1.0, "smoothing": False, "smooth_window": 9,
                 "smooth_polyorder": 3, "terminal_scale": 1.0, "warm_start_init": "hold",
                 "chunk_size": 256},
        "episode": {"max_steps": 200, "num_trials": 5, "seed": 0, "initial_state": None,
                    "randomize_initial": False},
    },
    "boat": {
        "plant": "boat",
        "boat": {"dt": 0.1, "M": None},
        "collect": {"num_samples": 30000, "episode_length": 60, "seed": 0},
        "lifting": {"kind": "mlp", "hidden": [256, 256], "lift_dim": 8, "append_state": False},
        "train": {"epochs": 25, "minibatch_size": 512, "learning_rate": 1e-3,
                  "beta1": 0.9, "beta2": 0.999, "adam_eps": 1e-8,
                  "val_fraction": 0.1, "refit_cadence": 1, "seed": 0, "normalize_inputs": True},
        "mppi": {"horizon": 20, "num_rollouts": 600, "sigma": [0.8, 0.8], "temperature": 20.0,
                 "adaptive": False, "adaptive_coeff": 0.5, "control_cost_weight": None,
                 "cost_mode": "sigma", "nu": 1.0, "smoothing": False, "smooth_window": 9,
                 "smooth_polyorder": 3, "terminal_scale": 1.0, "warm_start_init": "hold",
                 "chunk_size": 256},
        "episode": {"max_steps": 400, "num_trials": 4, "seed": 0, "initial_state": None,
                    "randomize_initial": False},
    },
    "quadruped": {
        "plant": "quadruped",
        "quadruped": {"mass": 12.0, "inertia_zz": 0.9, "com_height": 0.3, "dt": 0.05},
        "collect": {"num_samples": 40000, "episode_length": 50, "seed": 0},
        "lifting": {"kind": "mlp", "hidden": [256, 256], "lift_dim": 10, "append_state": False},
        "train": {"epochs": 25, "minibatch_size": 512, "learning_rate": 1e-3,
                  "beta1": 0.9, "beta2": 0.999, "adam_eps": 1e-8,
                  "val_fraction": 0.1, "refit_cadence": 1, "seed": 0, "normalize_inputs": True},
        "mppi": {"horizon": 40, "num_rollouts": 900, "sigma": [0.18, 0.18, 0.18],
                 "temperature": None, "adaptive": True, "adaptive_coeff": 0.5,
                 "control_cost_weight": None, "cost_mode": "sigma", "nu": 1.0,
                 "smoothing": False, "smooth_window": 9, "smooth_polyorder": 3,
                 "terminal_scale": 1.0, "warm_start_init": "hold", "chunk_size": 256},
        "episode": {"max_steps": 200, "num_trials": 10, "seed": 0, "initial_state": None,
                    "randomize_initial": True},
    },
}


def _merge(base: dict, override: dict) -> dict:
    out = dict(base)
    for k, v in override.items():
        out[k] = _merge(base[k], v) if isinstance(v, dict) and isinstance(base.get(k), dict) else v
    return out


def default_config(plant: str) -> dict:
    if plant not in DEFAULTS:
        raise ValueError(f"unknown plant {plant!r}; expected one of {sorted(DEFAULTS)}")
    return json.loads(json.dumps(DEFAULTS[plant]))


def load_config(path) -> dict:
    with open(path) as fh:
        user = yaml.safe_load(fh) or {}
    plant = user.get("plant")
    if plant is None:
        raise ValueError("config must set 'plant'")
    return _merge(default_config(plant), user)


def _to_plain(value):
    if isinstance(value, dict):
        return {k: _to_plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_to_plain(v) for v in value]
    if isinstance(value, np.ndarray):
        return _to_plain(value.tolist())
    if isinstance(value, np.generic):
        return value.item()
    return value


def save_config(path, cfg: dict) -> None:
    with open(path, "w") as fh:
        yaml.safe_dump(_to_plain(cfg), fh, sort_keys=True, default_flow_style=None)


def build_plant(cfg: dict) -> Plant:
    name = cfg["plant"]
    if name == "pendulum":
        return Pendulum(PendulumParams(**cfg.get("pendulum", {})))
    if name == "boat":
        section = dict(cfg.get("boat", {}))
        matrix = section.pop("M", None)
        params = BoatParams(**section) if matrix is None else BoatParams(
            hydro_matrix=np.asarray(matrix, dtype=np.float64).reshape(3, 22), **section)
        return Boat(params)
    if name == "quadruped":
        return Quadruped(QuadrupedParams(**cfg.get("quadruped", {})))
    raise ValueError(f"unknown plant {name!r}")


def build_collection_plant(cfg: dict) -> Plant:
    """Plant used for data collection.

    A wrapped angle makes the regression target jump by 2*pi whenever an
    exploration trajectory crosses the boundary, which a continuous lifting
    plus linear propagation cannot represent; collecting with wrapping
    disabled keeps the targets continuous. Closed-loop evaluation still uses
    the wrapped plant.
    """
    if cfg["plant"] == "pendulum" and cfg["collect"].get("unwrap_angles", False):
        merged = dict(cfg, pendulum=dict(cfg.get("pendulum", {}), wrap_theta=False))
        return build_plant(merged)
    return build_plant(cfg)


def build_lifting_spec(cfg: dict, plant: Plant) -> LiftingArchitecture | IdentityLifting:
    section = cfg["lifting"]
    if section.get("kind", "mlp") == "identity":
        return IdentityLifting(plant.model_dim)
    return LiftingArchitecture(
        input_dim=plant.model_dim,
        hidden_sizes=tuple(section["hidden"]),
        lift_dim=int(section["lift_dim"]),
        append_state=bool(section.get("append_state", False)),
    )


def build_train_config(cfg: dict) -> DkoTrainConfig:
    section = {k: v for k, v in cfg["train"].items() if k != "seed"}
    return DkoTrainConfig(**section)


def build_mppi_config(cfg: dict, plant: Plant) -> MppiConfig:
    section = dict(cfg["mppi"])
    sigma = np.asarray(section.pop("sigma"), dtype=np.float64)
    if sigma.ndim == 0:
        sigma = sigma.reshape(1, 1)
    elif sigma.ndim == 1:
        sigma = np.diag(sigma)
    adaptive = section.pop("adaptive", False)
    temperature = None if adaptive else section.pop("temperature")
    section.pop("temperature", None)
    return MppiConfig(
        sigma=sigma,
        temperature=temperature,
        input_low=plant.input_low,
        input_high=plant.input_high,
        **section,
    )


@dataclass
class EpisodeRecord:
    """One closed-loop episode: per-step history plus recomputable summary."""

    states: np.ndarray       # (steps+1, n)
    inputs: np.ndarray       # (steps, m)
    stage_costs: np.ndarray  # (steps,), cost of the state reached by input t
    task_states: np.ndarray | None
    min_costs: np.ndarray
    mean_costs: np.ndarray
    temperatures: np.ndarray
    ess: np.ndarray
    wall_us: np.ndarray
    failed: bool = False

    @property
    def steps(self) -> int:
        return len(self.inputs)


def run_episode(plant: Plant, controller: MppiController, x0: np.ndarray,
                max_steps: int) -> EpisodeRecord:
    """Roll the plant forward under the controller for max_steps steps."""
    x = np.asarray(x0, dtype=np.float64)
    n_states = max_steps + 1
    states = np.empty((n_states, plant.state_dim))
    states[0] = x
    inputs = np.empty((max_steps, plant.input_dim))
    stage_costs = np.empty(max_steps)
    min_costs = np.empty(max_steps)
    mean_costs = np.empty(max_steps)
    temperatures = np.empty(max_steps)
    ess = np.empty(max_steps)
    wall = np.empty(max_steps)
    has_task = isinstance(plant, Quadruped)
    task_states = np.empty((n_states, 8)) if has_task else None
    if has_task:
        task_states[0] = plant.task_state(x)
    failed = False
    steps = 0
    for t in range(max_steps):
        try:
            u, diag = controller.step(x)
        except ControllerError:
            failed = True
            break
        x = plant.step(x, u)
        states[t + 1] = x
        inputs[t] = u
        stage_costs[t] = plant.stage_cost(x)
        min_costs[t] = diag.min_cost
        mean_costs[t] = diag.mean_cost
        temperatures[t] = diag.temperature
        ess[t] = diag.effective_samples
        wall[t] = diag.wall_us
        if has_task:
            task_states[t + 1] = plant.task_state(x)
        steps = t + 1
    trim = slice(0, steps)
    return EpisodeRecord(
        states=states[: steps + 1],
        inputs=inputs[trim],
        stage_costs=stage_costs[trim],
        task_states=task_states[: steps + 1] if has_task else None,
        min_costs=min_costs[trim],
        mean_costs=mean_costs[trim],
        temperatures=temperatures[trim],
        ess=ess[trim],
        wall_us=wall[trim],
        failed=failed,
    )


def compute_metrics(record: EpisodeRecord, plant: Plant) -> dict:
    """Summary metrics; every value is recomputable from the per-step data."""
    if record.steps < 2:
        raise ValueError("episode must have at least 2 steps")
    inputs = record.inputs
    diffs = np.diff(inputs, axis=0)
    metrics = {
        "steps": record.steps,
        "total_cost": float(np.sum(record.stage_costs)),
        "tracking_error": float(np.mean(record.stage_costs)),
        "final_error": plant.final_error(record.states[-1]),
        "smoothness": float(np.sum(diffs ** 2) / record.steps),
        "success": bool(plant.episode_success(record.states)),
        "mean_step_ms": float(np.mean(record.wall_us) / 1e3),
        "failed": record.failed,
    }
    if isinstance(plant, Boat):
        metrics["final_position_error"] = plant.position_error(record.states[-1])
    return metrics


def save_record(path, record: EpisodeRecord, plant: Plant) -> None:
    """CSV per-step history; floats use repr so files round-trip exactly."""
    n, m = plant.state_dim, plant.input_dim
    cols = ["step"] + [f"x{i}" for i in range(n)]
    if record.task_states is not None:
        cols += [f"s{i}" for i in range(record.task_states.shape[1])]
    cols += [f"u{i}" for i in range(m)]
    cols += ["stage_cost", "min_cost", "mean_cost", "temperature", "ess", "wall_us"]
    with open(path, "w") as fh:
        fh.write(",".join(cols) + "\n")
        for t in range(record.steps):
            row = [str(t)]
            row += [repr(float(v)) for v in record.states[t + 1]]
            if record.task_states is not None:
                row += [repr(float(v)) for v in record.task_states[t + 1]]
            row += [repr(float(v)) for v in record.inputs[t]]
            row += [repr(float(record.stage_costs[t])), repr(float(record.min_costs[t])),
                    repr(float(record.mean_costs[t])), repr(float(record.temperatures[t])),
                    repr(float(record.ess[t])), repr(float(record.wall_us[t]))]
            fh.write(",".join(row) + "\n")


def summarize_trials(per_trial: list[dict]) -> dict:
    """Mean and std of every numeric metric across trials."""
    skip = {"failed", "trial", "success"}
    keys = [k for k in per_trial[0]
            if isinstance(per_trial[0][k], (int, float)) and k not in skip]
    summary: dict = {"num_trials": len(per_trial)}
    for k in keys:
        vals = np.array([float(m[k]) for m in per_trial])
        summary[f"{k}_mean"] = float(np.mean(vals))
        summary[f"{k}_std"] = float(np.std(vals))
    summary["success_rate"] = float(np.mean([m["success"] for m in per_trial]))
    return summary


def _outdir(cfg: dict, override=None) -> Path:
    out = Path(override) if override else Path(cfg.get("output_dir", "results"))
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_collect(cfg: dict, out=None, seed: int | None = None) -> Path:
    """Collect a uniform-random transition dataset; write data + manifest."""
    out = _outdir(cfg, out)
    plant = build_collection_plant(cfg)
    section = cfg["collect"]
    used_seed = section["seed"] if seed is None else seed
    data = collect_dataset(plant, section["num_samples"], used_seed,
                           episode_length=section["episode_length"])
    path = out / "dataset.csv"
    save_dataset(path, data)
    manifest = {
        "plant": plant.name,
        "seed": int(used_seed),
        "num_samples": len(data),
        "episode_length": section["episode_length"],
        "n": data.state_dim,
        "m": data.input_dim,
        "state_low": data.state_low.tolist(),
        "state_high": data.state_high.tolist(),
        "input_low": data.input_low.tolist(),
        "input_high": data.input_high.tolist(),
    }
    (out / "dataset_manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    save_config(out / "effective_config.yaml", cfg)
    return path


def cmd_train(cfg: dict, dataset_path, out=None, seed: int | None = None) -> Path:
    """Train the Koopman surrogate on a dataset file; write model + log."""
    out = _outdir(cfg, out)
    plant = build_plant(cfg)
    data = load_dataset(dataset_path)
    if data.state_dim != plant.model_dim:
        raise ValueError(f"dataset state dim {data.state_dim} does not match "
                         f"plant model dim {plant.model_dim}")
    spec = build_lifting_spec(cfg, plant)
    train_cfg = build_train_config(cfg)
    used_seed = cfg["train"]["seed"] if seed is None else seed
    model, history = train_dko(data, spec, train_cfg, used_seed)
    path = out / "model.npz"
    save_model(path, model)
    _write_train_log(out / "train_log.csv", history)
    save_config(out / "effective_config.yaml", cfg)
    final_rmse = history.val_rmse[-1] if history.val_rmse else one_step_rmse(model, data)
    print(f"final validation one-step RMSE: {final_rmse:.3e}")
    return path


def _write_train_log(path, history: TrainLog) -> None:
    with open(path, "w") as fh:
        fh.write("epoch,train_loss,val_rmse\n")
        for epoch, loss, rmse in history.rows():
            fh.write(f"{epoch},{repr(loss)},{repr(rmse)}\n")


def make_controller(cfg: dict, plant: Plant, backend_kind: str,
                    model: KoopmanModel | None = None, master_seed: int = 0) -> MppiController:
    mppi_cfg = build_mppi_config(cfg, plant)
    backend = make_backend(backend_kind, plant, model)
    return MppiController(mppi_cfg, backend, master_seed=master_seed)


def _initial_state(cfg: dict, plant: Plant, trial: int) -> np.ndarray:
    section = cfg["episode"]
    if section.get("initial_state") is not None:
        return np.asarray(section["initial_state"], dtype=np.float64)
    if section.get("randomize_initial", False):
        rng = np.random.default_rng(int(section["seed"]) * 7919 + trial)
        return plant.default_initial_state(rng)
    return plant.default_initial_state(None)


def cmd_run(cfg: dict, model_path=None, backend: str = "dk", out=None,
            seed: int | None = None) -> dict:
    """Run num_trials closed-loop episodes; write one record per trial plus
    a mean/std summary across trials."""
    out = _outdir(cfg, out)
    plant = build_plant(cfg)
    model = load_model(model_path) if model_path is not None else None
    if backend in ("dk", "relift") and model is None:
        raise ValueError(f"backend {backend!r} requires --model")
    section = cfg["episode"]
    base_seed = section["seed"] if seed is None else seed
    per_trial = []
    for trial in range(section["num_trials"]):
        controller = make_controller(cfg, plant, backend, model,
                                     master_seed=int(base_seed) + 1000 * trial)
        x0 = _initial_state(cfg, plant, trial)
        record = run_episode(plant, controller, x0, section["max_steps"])
        if record.failed and record.steps < 2:
            metrics = {"steps": record.steps, "success": False, "failed": True}
        else:
            metrics = compute_metrics(record, plant)
        metrics["trial"] = trial
        metrics["initial_state"] = [float(v) for v in x0]
        save_record(out / f"trial_{trial:03d}.csv", record, plant)
        per_trial.append(metrics)
    summary = summarize_trials(per_trial)
    summary["backend"] = backend
    summary["plant"] = plant.name
    payload = {"summary": summary, "trials": per_trial}
    (out / "summary.json").write_text(json.dumps(payload, indent=2) + "\n")
    save_config(out / "effective_config.yaml", cfg)
    return payload


def cmd_bench(cfg: dict, model_path, out=None, warmup: int = 10,
              measure: int = 100) -> dict:
    """Per-step compute-time comparison of the dk / true / relift backends.

    Warm-up steps are excluded; each backend runs its own closed-loop episode
    from the plant's default initial state using a monotonic clock.
    """
    out = _outdir(cfg, out)
    plant = build_plant(cfg)
    model = load_model(model_path)
    steps = warmup + measure
    report: dict = {"plant": plant.name, "warmup_steps": warmup, "measured_steps": measure,
                    "backends": {}}
    for kind in ("dk", "true", "relift"):
        controller = make_controller(cfg, plant, kind, model, master_seed=0)
        x = plant.default_initial_state(None)
        times = np.empty(steps)
        lifting = model.lifting
        evals_before = lifting.eval_count
        for t in range(steps):
            t0 = time.perf_counter()
            u, _ = controller.step(x)
            times[t] = (time.perf_counter() - t0) * 1e3
            x = plant.step(x, u)
        lift_evals = lifting.eval_count - evals_before
        measured = times[warmup:]
        report["backends"][kind] = {
            "mean_ms": float(np.mean(measured)),
            "std_ms": float(np.std(measured)),
            "lift_evals_per_step": (lift_evals / steps) if kind != "true" else 0.0,
        }
    dk_mean = report["backends"]["dk"]["mean_ms"]
    report["true_over_dk"] = report["backends"]["true"]["mean_ms"] / dk_mean
    report["relift_over_dk"] = report["backends"]["relift"]["mean_ms"] / dk_mean
    (out / "bench.json").write_text(json.dumps(report, indent=2) + "\n")
    save_config(out / "effective_config.yaml", cfg)
    return report
