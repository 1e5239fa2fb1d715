"""Compositional zero-shot learning engine.

Conditional object/attribute decomposition over precomputed backbone
embeddings: a minimal autodiff tape, attention-pooled decomposition heads,
jointly tempered cross-entropy training with Adam, additive-score
inference, and the calibrated seen/unseen evaluation protocol.
"""

from .errors import (
    ConfigError,
    CpfError,
    DataError,
    DimensionError,
    FormatError,
    NumericError,
)
from .model import (
    CompositionSpace,
    CpfParams,
    FeatureBundle,
    TextEmbeddings,
    forward_losses,
    forward_probs,
)
from .tensor import Tape, Tensor, backward, grad_check

__version__ = "0.1.0"

__all__ = [
    "CompositionSpace",
    "ConfigError",
    "CpfError",
    "CpfParams",
    "DataError",
    "DimensionError",
    "FeatureBundle",
    "FormatError",
    "NumericError",
    "Tape",
    "Tensor",
    "TextEmbeddings",
    "backward",
    "forward_losses",
    "forward_probs",
    "grad_check",
    "__version__",
]
