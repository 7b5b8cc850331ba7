"""Flow-based pedestrian trajectory forecasting on a minimal autodiff core."""

__version__ = "0.1.0"

from .numcore import Tensor, Tape, record, no_grad, backward  # noqa: F401
