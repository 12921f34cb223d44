"""Learned linear Koopman surrogates for sampling-based (MPPI) control."""

from .koopman import (
    DkoTrainConfig,
    KoopmanModel,
    TrainingError,
    TransitionDataset,
    build_data_matrices,
    fit_ABC,
    load_dataset,
    load_model,
    predict_one_step,
    rollout_lifted,
    save_dataset,
    save_model,
    train_dko,
)
from .lifting import (
    AdamState,
    IdentityLifting,
    LiftingArchitecture,
    LiftingNetwork,
    adam_step,
    lift_backward,
    lift_forward,
    lift_init,
)
from .mppi import (
    ControllerError,
    MppiConfig,
    MppiController,
    compute_weights,
    make_backend,
    sample_noise,
    shift_warm_start,
    update_controls,
)
from .numerics import NoiseStreamKey, gaussian_sample, pinv, savgol_smooth
from .plants import Boat, Pendulum, Plant, Quadruped, collect_dataset, make_plant

__version__ = "0.1.0"
