"""Multi-frame optical flow and occlusion estimation with a network recurrent over scale and time."""

from .checkpoint import load_checkpoint, save_checkpoint
from .errors import ConfigError, ContractError, DimensionError, DivergenceError, FormatError
from .network import ModelConfig, RecurrentFlowNet, count_parameters
from .ablation import run_ablation
from .trainer import TrainConfig, evaluate, train

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "ContractError",
    "DimensionError",
    "DivergenceError",
    "FormatError",
    "ModelConfig",
    "RecurrentFlowNet",
    "TrainConfig",
    "count_parameters",
    "evaluate",
    "load_checkpoint",
    "run_ablation",
    "save_checkpoint",
    "train",
]
