"""Backend interfaces and feature containers for the victim encoders.

A visual backend is a frozen encoder: fixed input resolution, declared
feature dimension and patch grid, deterministic forward pass, and gradients
w.r.t. the input only. Column 0 of the feature matrix is the CLS summary
token; columns 1.. map to patch grid positions in row-major order.
"""

from __future__ import annotations

import abc
from dataclasses import dataclass

import numpy as np

from ..exceptions import ContractViolationError
from ..types import as_image_array


@dataclass(frozen=True)
class PatchGridFeatures:
    """Encoder output: an (N_f, N_h*N_w + 1) matrix plus its grid geometry."""

    matrix: np.ndarray
    grid_h: int
    grid_w: int

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64)
        if m.ndim != 2:
            raise ContractViolationError(f"feature matrix must be 2-D, got {m.shape}")
        if m.shape[1] != self.grid_h * self.grid_w + 1:
            raise ContractViolationError(
                f"feature matrix has {m.shape[1]} columns, expected "
                f"{self.grid_h}*{self.grid_w}+1 = {self.grid_h * self.grid_w + 1}"
            )
        if not np.all(np.isfinite(m)):
            raise ContractViolationError("feature matrix contains non-finite values")
        object.__setattr__(self, "matrix", m)

    @property
    def feature_dim(self) -> int:
        return self.matrix.shape[0]

    @property
    def cls_column(self) -> np.ndarray:
        return self.matrix[:, 0]


@dataclass(frozen=True)
class LatentVector:
    """A vector in the shared image-text latent space."""

    vector: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.vector, dtype=np.float64)
        if v.ndim != 1:
            raise ContractViolationError(f"latent vector must be 1-D, got {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ContractViolationError("latent vector contains non-finite values")
        object.__setattr__(self, "vector", v)

    @property
    def dim(self) -> int:
        return self.vector.shape[0]


class VisualBackend(abc.ABC):
    """Frozen visual encoder with input gradients.

    Attributes declared by every implementation:
      backend_id    registry id string
      input_hw      required (H, W)
      channels      required channel count
      feature_dim   N_f
      grid_hw       (N_h, N_w)
      latent_dim    output dimension of the CLS-to-latent projection
      thread_safe   True when concurrent read-only inference is allowed
    """

    backend_id: str = "abstract"
    thread_safe: bool = True

    @abc.abstractmethod
    def encode(self, x) -> np.ndarray:
        """Encode an image into the (N_f, N_h*N_w + 1) feature matrix."""

    @abc.abstractmethod
    def encode_vjp(self, x, cotangent: np.ndarray) -> np.ndarray:
        """Pull a feature-space cotangent back to an image-space gradient.

        For a downstream scalar loss L with dL/d(features) = ``cotangent``,
        returns dL/dx with the shape of ``x``.
        """

    @abc.abstractmethod
    def project_latent_cls(self, cls_vec: np.ndarray) -> np.ndarray:
        """Apply the visual-to-latent projection to a CLS vector."""

    @abc.abstractmethod
    def project_latent_vjp(self, cls_vec: np.ndarray, cotangent: np.ndarray) -> np.ndarray:
        """Pull a latent-space cotangent back to a CLS-space gradient."""

    # -- shared plumbing -------------------------------------------------

    def check_input(self, x) -> np.ndarray:
        arr = as_image_array(x)
        expect = (*self.input_hw, self.channels)
        if arr.shape != expect:
            raise ContractViolationError(
                f"backend {self.backend_id!r} requires input shape {expect}, got {arr.shape}"
            )
        return arr

    @property
    def n_patches(self) -> int:
        return self.grid_hw[0] * self.grid_hw[1]


class TextBackend(abc.ABC):
    """Deterministic text-to-latent encoder paired with a visual backend family."""

    backend_id: str = "abstract-text"
    latent_dim: int = 0

    @abc.abstractmethod
    def encode_text(self, text: str) -> np.ndarray:
        """Map non-empty text to a latent vector of dimension ``latent_dim``."""


def encode_image(backend: VisualBackend, x) -> PatchGridFeatures:
    """Run the visual encoder and wrap its output with grid metadata."""
    matrix = backend.encode(x)
    gh, gw = backend.grid_hw
    return PatchGridFeatures(matrix=matrix, grid_h=gh, grid_w=gw)


def project_latent(backend: VisualBackend, f: PatchGridFeatures) -> LatentVector:
    """Project the CLS column into the shared latent space.

    Only column 0 participates; patch columns never affect the result.
    """
    if f.feature_dim != backend.feature_dim:
        raise ContractViolationError(
            f"feature dim {f.feature_dim} does not match backend {backend.feature_dim}"
        )
    return LatentVector(backend.project_latent_cls(f.cls_column))


def encode_text(backend: TextBackend, text: str) -> LatentVector:
    if not text or not text.strip():
        raise ContractViolationError("text must be non-empty")
    vec = backend.encode_text(text)
    if vec.shape != (backend.latent_dim,):
        raise ContractViolationError(
            f"text backend {backend.backend_id!r} returned shape {vec.shape}, "
            f"declared latent_dim {backend.latent_dim}"
        )
    return LatentVector(vec)


def patch_features(f: PatchGridFeatures) -> np.ndarray:
    """Drop the CLS column, keeping the (N_f, N_h*N_w) patch block."""
    return np.array(f.matrix[:, 1:])
