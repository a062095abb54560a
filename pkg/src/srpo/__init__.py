"""Score-regularized policy extraction on desk-scale problems.

A pure-numpy stack: small dense nets with manual backprop, a VP diffusion
schedule, a noise-prediction behavior model, an expectile critic and the
extraction step that trains a deterministic policy against both.
"""

__version__ = "0.1.0"

from .errors import (CheckpointError, ConfigError, DependencyError, NonFiniteGradientError,
                     NumericError, ShapeError, SrpoError)
from .schedule import T_RANGE, VPSchedule

__all__ = [
    "__version__",
    "CheckpointError",
    "ConfigError",
    "DependencyError",
    "NonFiniteGradientError",
    "NumericError",
    "ShapeError",
    "SrpoError",
    "T_RANGE",
    "VPSchedule",
]
