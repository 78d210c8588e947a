"""Window plus coarse dual attention with neural-memory ODE blocks for 3-D segmentation."""
from .errors import (ConfigurationError, CorruptFileError, DimensionError, FormatError, NonFiniteError,
                     SegStitchError, UsageError, ValidationError)
from .model import ModelConfig, build_model, forward
from .nmode import SolverConfig

__version__ = "0.1.0"

__all__ = ["ConfigurationError", "CorruptFileError", "DimensionError", "FormatError", "NonFiniteError",
           "SegStitchError", "UsageError", "ValidationError", "ModelConfig", "SolverConfig", "build_model",
           "forward"]
