"""MSSDMPA-Net: multi-scale supervised dilated multi-path attention segmentation.

A self-contained numpy implementation of the architecture and its training
loop: lossless index pooling, probability-map-guided attention (DAMIP and
DAMSCA), dilated multi-path encoding with deep multi-scale supervision, and
the verification tooling (gradient audit, shape audit) that makes the whole
stack checkable at desk scale.
"""

from .tensor import Tensor, no_grad
from .nn_ops import ConvSpec
from .errors import (
    BitDepthError,
    CheckpointError,
    ConfigError,
    DataError,
    DivergenceError,
    ExtentMismatchError,
    MissingFileError,
    ShapeError,
)

__version__ = "0.1.0"

__all__ = [
    "Tensor",
    "no_grad",
    "ConvSpec",
    "ShapeError",
    "ConfigError",
    "DataError",
    "MissingFileError",
    "ExtentMismatchError",
    "BitDepthError",
    "CheckpointError",
    "DivergenceError",
    "__version__",
]
