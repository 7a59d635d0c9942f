"""Swift parameter-free attention network (SPAN) for single-image super-resolution,
implemented on numpy with hand-written gradients."""

from .model import (PRESETS, SpanConfig, SpanModel, fuse_model, init_model, parameter_count,
                    span_backward, span_forward, with_variant)
from .ops import Activation, PaddingMode
from .train import TRAIN_PRESETS, TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "PRESETS", "SpanConfig", "SpanModel", "fuse_model", "init_model", "parameter_count",
    "span_backward", "span_forward", "with_variant", "Activation", "PaddingMode",
    "TRAIN_PRESETS", "TrainConfig", "train",
]
