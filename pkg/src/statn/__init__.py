"""Statistical transformer networks: learnable shape models inside a spatial transformer."""

from .errors import (ConfigurationError, ConstraintError, FormatError, InputError,
                     NumericalError, StaTNError)
from .geometry import PoseParams, ShapeModel, UpsampleWeights
from .pipeline import ModelConfig, StaTNModel, TrainConfig, TrainLog, train

__version__ = "0.1.0"
