"""Bridge-diffusion reconstruction of undersampled MR magnitude images."""

from .bridge import (
    SamplerConfig,
    TrainerState,
    TrainingConfig,
    bridge_losses,
    make_predictor,
    make_trainer,
    sample,
    train_step,
)
from .denoiser import DenoiserConfig, denoiser_forward, init_params
from .errors import (
    BridgeMRIError,
    ConfigError,
    DataError,
    NumericsError,
    ShapeError,
)
from .rng import RngState, stream
from .schedule import BridgeSchedule, make_schedule
from .tensor import Tensor, backward, gradient_check

__version__ = "0.1.0"

__all__ = [
    "BridgeMRIError",
    "BridgeSchedule",
    "ConfigError",
    "DataError",
    "DenoiserConfig",
    "NumericsError",
    "RngState",
    "SamplerConfig",
    "ShapeError",
    "Tensor",
    "TrainerState",
    "TrainingConfig",
    "__version__",
    "backward",
    "bridge_losses",
    "denoiser_forward",
    "gradient_check",
    "init_params",
    "make_predictor",
    "make_schedule",
    "make_trainer",
    "sample",
    "stream",
    "train_step",
]
