"""Deterministic desk-scale encoders.

Two visual backends ship with the toolkit:

* ``avgpool`` -- per-patch channel means with an identity latent projection.
  Linear, permutation-equivariant under patch-preserving geometry, and with
  a closed-form gradient; it is the exact oracle used by the augmentation
  equivariance tests.
* ``toyconv`` -- a single tanh patch-embedding layer with fixed random
  weights. Nonlinear, used to stress the optimizers and the gradient checks.

Text encoders map prompts to latent vectors either by seeded hashing
(collision-free in practice) or a static lookup table for tests.
"""

from __future__ import annotations

import hashlib

import numpy as np

from ..exceptions import ContractViolationError
from ..registry import TEXT_BACKENDS, VISUAL_BACKENDS
from .base import TextBackend, VisualBackend


def _check_grid(image_hw, grid_hw):
    (h, w), (gh, gw) = image_hw, grid_hw
    if h % gh or w % gw:
        raise ContractViolationError(
            f"grid {grid_hw} must divide image dims {image_hw}"
        )
    return h // gh, w // gw


@VISUAL_BACKENDS.register("avgpool")
class AvgPoolBackend(VisualBackend):
    """Average-pool patch encoder: feature of a patch is its per-channel mean."""

    backend_id = "avgpool"
    thread_safe = True

    def __init__(self, image_hw=(32, 32), grid_hw=(4, 4), channels=3):
        self.input_hw = tuple(image_hw)
        self.grid_hw = tuple(grid_hw)
        self.channels = int(channels)
        self.patch_hw = _check_grid(self.input_hw, self.grid_hw)
        self.feature_dim = self.channels
        self.latent_dim = self.channels

    def encode(self, x) -> np.ndarray:
        arr = self.check_input(x)
        gh, gw = self.grid_hw
        ph, pw = self.patch_hw
        patches = arr.reshape(gh, ph, gw, pw, self.channels).mean(axis=(1, 3))
        patch_cols = patches.reshape(gh * gw, self.channels).T
        cls = arr.mean(axis=(0, 1))
        return np.concatenate([cls[:, None], patch_cols], axis=1)

    def encode_vjp(self, x, cotangent: np.ndarray) -> np.ndarray:
        arr = self.check_input(x)
        gh, gw = self.grid_hw
        ph, pw = self.patch_hw
        cot = np.asarray(cotangent, dtype=np.float64)
        if cot.shape != (self.feature_dim, gh * gw + 1):
            raise ContractViolationError(f"cotangent shape {cot.shape} mismatch")
        per_patch = cot[:, 1:].T.reshape(gh, gw, self.channels) / (ph * pw)
        grad = np.broadcast_to(
            per_patch[:, None, :, None, :], (gh, ph, gw, pw, self.channels)
        ).reshape(arr.shape).copy()
        grad += cot[:, 0] / (arr.shape[0] * arr.shape[1])
        return grad

    def project_latent_cls(self, cls_vec: np.ndarray) -> np.ndarray:
        return np.asarray(cls_vec, dtype=np.float64).copy()

    def project_latent_vjp(self, cls_vec, cotangent: np.ndarray) -> np.ndarray:
        return np.asarray(cotangent, dtype=np.float64).copy()


@VISUAL_BACKENDS.register("toyconv")
class ToyConvBackend(VisualBackend):
    """One-layer tanh patch embedding with fixed seeded weights.

    Patch columns are tanh(W @ patch + b); the CLS column is
    tanh(W_cls @ global_mean + b_cls); the latent projection is a fixed
    random matrix applied to CLS.
    """

    backend_id = "toyconv"
    thread_safe = True

    def __init__(self, image_hw=(32, 32), grid_hw=(4, 4), channels=3,
                 feature_dim=8, latent_dim=6, seed=0):
        self.input_hw = tuple(image_hw)
        self.grid_hw = tuple(grid_hw)
        self.channels = int(channels)
        self.patch_hw = _check_grid(self.input_hw, self.grid_hw)
        self.feature_dim = int(feature_dim)
        self.latent_dim = int(latent_dim)
        self.seed = int(seed)

        ph, pw = self.patch_hw
        fan_in = ph * pw * self.channels
        rng = np.random.default_rng(self.seed)
        self.weight = rng.standard_normal((self.feature_dim, fan_in)) / np.sqrt(fan_in)
        self.bias = 0.1 * rng.standard_normal(self.feature_dim)
        self.cls_weight = rng.standard_normal((self.feature_dim, self.channels))
        self.cls_bias = 0.1 * rng.standard_normal(self.feature_dim)
        self.latent_proj = rng.standard_normal(
            (self.latent_dim, self.feature_dim)
        ) / np.sqrt(self.feature_dim)

    def _patch_matrix(self, arr):
        gh, gw = self.grid_hw
        ph, pw = self.patch_hw
        return (
            arr.reshape(gh, ph, gw, pw, self.channels)
            .transpose(0, 2, 1, 3, 4)
            .reshape(gh * gw, ph * pw * self.channels)
        )

    def encode(self, x) -> np.ndarray:
        arr = self.check_input(x)
        z = np.tanh(self._patch_matrix(arr) @ self.weight.T + self.bias)
        z0 = np.tanh(self.cls_weight @ arr.mean(axis=(0, 1)) + self.cls_bias)
        return np.concatenate([z0[:, None], z.T], axis=1)

    def encode_vjp(self, x, cotangent: np.ndarray) -> np.ndarray:
        arr = self.check_input(x)
        gh, gw = self.grid_hw
        ph, pw = self.patch_hw
        cot = np.asarray(cotangent, dtype=np.float64)
        if cot.shape != (self.feature_dim, gh * gw + 1):
            raise ContractViolationError(f"cotangent shape {cot.shape} mismatch")

        pm = self._patch_matrix(arr)
        z = np.tanh(pm @ self.weight.T + self.bias)
        dpre = cot[:, 1:].T * (1.0 - z * z)
        dpm = dpre @ self.weight
        grad = (
            dpm.reshape(gh, gw, ph, pw, self.channels)
            .transpose(0, 2, 1, 3, 4)
            .reshape(arr.shape)
        ).copy()

        z0 = np.tanh(self.cls_weight @ arr.mean(axis=(0, 1)) + self.cls_bias)
        dmean = self.cls_weight.T @ (cot[:, 0] * (1.0 - z0 * z0))
        grad += dmean / (arr.shape[0] * arr.shape[1])
        return grad

    def project_latent_cls(self, cls_vec: np.ndarray) -> np.ndarray:
        return self.latent_proj @ np.asarray(cls_vec, dtype=np.float64)

    def project_latent_vjp(self, cls_vec, cotangent: np.ndarray) -> np.ndarray:
        return self.latent_proj.T @ np.asarray(cotangent, dtype=np.float64)


def _hash_floats(key: str, n: int) -> np.ndarray:
    """n floats in [0, 1) derived from a blake2b stream over ``key``."""
    out = np.empty(n, dtype=np.float64)
    for i in range(n):
        digest = hashlib.blake2b(f"{key}|{i}".encode("utf-8"), digest_size=8).digest()
        out[i] = int.from_bytes(digest, "little") / 2.0**64
    return out


@TEXT_BACKENDS.register("hashtext")
class HashTextBackend(TextBackend):
    """Seeded hash-based text encoder; values land in [0.1, 0.9] so a constant
    image can reproduce them through the avgpool CLS path."""

    backend_id = "hashtext"

    def __init__(self, latent_dim=3, seed=0):
        self.latent_dim = int(latent_dim)
        self.seed = int(seed)

    def encode_text(self, text: str) -> np.ndarray:
        u = _hash_floats(f"hashtext:{self.seed}:{text}", self.latent_dim)
        return 0.1 + 0.8 * u


@TEXT_BACKENDS.register("statictext")
class StaticTextBackend(TextBackend):
    """Lookup-table text encoder for constructing exact test scenarios."""

    backend_id = "statictext"

    def __init__(self, mapping, latent_dim=None):
        self.mapping = {k: np.asarray(v, dtype=np.float64) for k, v in mapping.items()}
        if not self.mapping and latent_dim is None:
            raise ContractViolationError("empty mapping requires explicit latent_dim")
        self.latent_dim = int(latent_dim) if latent_dim is not None else (
            next(iter(self.mapping.values())).shape[0]
        )

    def encode_text(self, text: str) -> np.ndarray:
        if text not in self.mapping:
            raise ContractViolationError(f"no static vector for text {text!r}")
        return self.mapping[text].copy()
