from .base import (
    LatentVector,
    PatchGridFeatures,
    TextBackend,
    VisualBackend,
    encode_image,
    encode_text,
    patch_features,
    project_latent,
)
from .toy import AvgPoolBackend, HashTextBackend, StaticTextBackend, ToyConvBackend

__all__ = [
    "AvgPoolBackend",
    "HashTextBackend",
    "LatentVector",
    "PatchGridFeatures",
    "StaticTextBackend",
    "TextBackend",
    "ToyConvBackend",
    "VisualBackend",
    "encode_image",
    "encode_text",
    "patch_features",
    "project_latent",
]
