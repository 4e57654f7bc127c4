"""geofuse: desk-scale lab for gated semantic/geometric fusion in toy
vision-language-action policies with flow-matching action generation."""

from .config import ExperimentConfig
from .errors import GeofuseError
from .policy import FusionPolicy
from .rng import RngStream
from .tensor import Param, ParamSet, Tensor

__all__ = [
    "ExperimentConfig",
    "FusionPolicy",
    "GeofuseError",
    "Param",
    "ParamSet",
    "RngStream",
    "Tensor",
]

__version__ = "0.1.0"
