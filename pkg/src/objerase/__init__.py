"""Understanding-guided video object removal at desk scale."""

from .errors import (
    DegenerateInputError,
    GradientCheckError,
    TrainingDivergedError,
    ValidationError,
)
from .video import ClipManifest, MaskTensor, VideoTensor, load_clip, save_clip

__version__ = "0.1.0"

__all__ = [
    "ClipManifest",
    "DegenerateInputError",
    "GradientCheckError",
    "MaskTensor",
    "TrainingDivergedError",
    "ValidationError",
    "VideoTensor",
    "load_clip",
    "save_clip",
    "__version__",
]
