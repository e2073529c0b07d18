"""Deep hashing for image retrieval with a from-scratch vision transformer."""

__version__ = "0.1.0"

from .dual_stream import DualStreamConfig, HashModel
from .errors import ConfigError, ContractError, FormatError, NumericError, ShapeError
from .train import Checkpoint, TrainConfig, desk_config, encode, train
from .vit import BackboneConfig

__all__ = [
    "BackboneConfig",
    "Checkpoint",
    "ConfigError",
    "ContractError",
    "DualStreamConfig",
    "FormatError",
    "NumericError",
    "ShapeError",
    "TrainConfig",
    "HashModel",
    "desk_config",
    "encode",
    "train",
]
