"""Low-light image enhancement on a small numpy autodiff engine."""

from dark.model import ModelConfig, build_model, count_parameters, forward_enhance
from dark.tensor import Tape, Tensor, backward, high_precision

__all__ = [
    "ModelConfig",
    "Tape",
    "Tensor",
    "backward",
    "build_model",
    "count_parameters",
    "forward_enhance",
    "high_precision",
]
__version__ = "0.1.0"
