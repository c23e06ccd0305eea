"""Multimodal semantic segmentation with a frozen ViT backbone, modality adapters and SE fusion."""
from .kernels import BACKEND
from .model import MANet, ModelConfig

__version__ = "0.1.0"
__all__ = ["BACKEND", "MANet", "ModelConfig", "__version__"]
