"""Zero-bias CNN for facial expression recognition, with deconvnet
visualization and filter-to-action-unit KL analysis. numpy only."""

from .errors import DataError, FormatError, IngestionError, NumericError, UsageError, ZbcnnError
from .model import ModelParams, ModelSpec, Network
from .tensor import Rng, Tensor

__version__ = "0.1.0"

__all__ = ["DataError", "FormatError", "IngestionError", "NumericError", "UsageError", "ZbcnnError",
           "ModelParams", "ModelSpec", "Network", "Rng", "Tensor", "__version__"]
