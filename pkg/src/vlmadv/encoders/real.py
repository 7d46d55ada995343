"""Adapters for real CLIP-family vision towers (not exercised in CI).

These wrap a frozen ``transformers`` CLIP vision model behind the same
value-and-gradient interface as the toy backends. Loading requires torch,
transformers, and locally available weights, so everything is imported
lazily and nothing here runs in the test suite; see the README smoke recipe.

Preprocessing note: this adapter resizes with bilinear interpolation to the
model resolution and applies the checkpoint's pixel mean/std. Other front
ends may crop or tile differently; each adapter owns its preprocessing.
"""

from __future__ import annotations

import numpy as np

from ..exceptions import BackendUnavailableError
from ..registry import VISUAL_BACKENDS
from .base import VisualBackend


def _require_torch():
    try:
        import torch  # noqa: F401
        import transformers  # noqa: F401
    except ImportError as exc:  # pragma: no cover - real-backend path
        raise BackendUnavailableError(
            "real CLIP adapters need the optional [real] dependencies "
            "(torch, transformers)"
        ) from exc


@VISUAL_BACKENDS.register("clip_vision")
class ClipVisionBackend(VisualBackend):  # pragma: no cover - needs model weights
    """CLIP vision tower (e.g. openai/clip-vit-large-patch14-336 as used by
    LLAVA-class models) exposing patch features and the CLS latent projection."""

    backend_id = "clip_vision"
    thread_safe = False

    def __init__(self, model_name="openai/clip-vit-large-patch14-336", device="cpu"):
        _require_torch()
        import torch
        from transformers import CLIPModel, CLIPProcessor

        self.device = device
        self.model = CLIPModel.from_pretrained(model_name).to(device).eval()
        for p in self.model.parameters():
            p.requires_grad_(False)
        proc = CLIPProcessor.from_pretrained(model_name)
        size = self.model.config.vision_config.image_size
        patch = self.model.config.vision_config.patch_size
        self.input_hw = (size, size)
        self.channels = 3
        self.grid_hw = (size // patch, size // patch)
        self.feature_dim = self.model.config.vision_config.hidden_size
        self.latent_dim = self.model.config.projection_dim
        mean = np.asarray(proc.image_processor.image_mean, dtype=np.float64)
        std = np.asarray(proc.image_processor.image_std, dtype=np.float64)
        self._mean = torch.tensor(mean.reshape(1, 3, 1, 1), dtype=torch.float32)
        self._std = torch.tensor(std.reshape(1, 3, 1, 1), dtype=torch.float32)
        self._torch = torch

    def _forward(self, xt):
        normed = (xt - self._mean.to(xt.device)) / self._std.to(xt.device)
        out = self.model.vision_model(pixel_values=normed)
        return out.last_hidden_state[0]  # (1 + n_patches, N_f)

    def _to_tensor(self, x, requires_grad=False):
        arr = self.check_input(x)
        xt = self._torch.tensor(
            arr.transpose(2, 0, 1)[None], dtype=self._torch.float32, device=self.device
        )
        if requires_grad:
            xt.requires_grad_(True)
        return xt

    def encode(self, x) -> np.ndarray:
        with self._torch.no_grad():
            hidden = self._forward(self._to_tensor(x))
        return hidden.T.cpu().numpy().astype(np.float64)

    def encode_vjp(self, x, cotangent) -> np.ndarray:
        xt = self._to_tensor(x, requires_grad=True)
        hidden = self._forward(xt)
        cot = self._torch.tensor(
            np.asarray(cotangent).T, dtype=self._torch.float32, device=self.device
        )
        (grad,) = self._torch.autograd.grad(hidden, xt, grad_outputs=cot)
        return grad[0].permute(1, 2, 0).cpu().numpy().astype(np.float64)

    def project_latent_cls(self, cls_vec) -> np.ndarray:
        t = self._torch.tensor(np.asarray(cls_vec), dtype=self._torch.float32)
        with self._torch.no_grad():
            pooled = self.model.vision_model.post_layernorm(t[None])
            lat = self.model.visual_projection(pooled)[0]
        return lat.cpu().numpy().astype(np.float64)

    def project_latent_vjp(self, cls_vec, cotangent) -> np.ndarray:
        t = self._torch.tensor(
            np.asarray(cls_vec), dtype=self._torch.float32
        ).requires_grad_(True)
        pooled = self.model.vision_model.post_layernorm(t[None])
        lat = self.model.visual_projection(pooled)[0]
        cot = self._torch.tensor(np.asarray(cotangent), dtype=self._torch.float32)
        (grad,) = self._torch.autograd.grad(lat, t, grad_outputs=cot)
        return grad.cpu().numpy().astype(np.float64)
