"""Paired geometric transforms at image and patch-grid resolution.

A sampled ``TransformPair`` encodes one geometry that can be applied to an
image (``apply_image_transform``) or to the patch columns of a feature
matrix (``apply_feature_transform``). Flips and quarter-turn rotations are
exact raster operations at both resolutions. Resize is a nearest-neighbor
zoom about the center evaluated on the patch lattice and lifted to pixel
blocks, so a pooling encoder sees exactly the same geometry at both
resolutions for any scale factor; cells whose source falls outside the
raster are zero-filled.

Rotation angles are restricted to multiples of 90 degrees: arbitrary angles
cannot be represented consistently on a coarse patch grid without
interpolation smearing, which would break the feature/image pairing.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .exceptions import ContractViolationError
from .types import ImageTensor, as_image_array


@dataclass(frozen=True)
class TransformPair:
    """One sampled geometry: flips, quarter turns, zoom scale, and the draw seed."""

    flip_h: bool = False
    flip_v: bool = False
    quarter_turns: int = 0
    scale: float = 1.0
    seed: int | None = None

    def __post_init__(self):
        if self.quarter_turns % 1 or not 0 <= int(self.quarter_turns) <= 3:
            raise ContractViolationError("quarter_turns must be an integer in 0..3")
        if self.scale <= 0:
            raise ContractViolationError("scale must be positive")

    @property
    def is_identity(self) -> bool:
        return (not self.flip_h and not self.flip_v
                and self.quarter_turns == 0 and self.scale == 1.0)


@dataclass(frozen=True)
class TransformConfig:
    """Sampling pool for per-iteration transform draws.

    Defaults: horizontal flip with p=0.5, a uniform quarter-turn rotation,
    and a zoom scale uniform in [0.8, 1.2]. Set a probability to 0 /
    choices to None / range to None to disable a kind; ``identity()``
    disables everything.
    """

    hflip_prob: float = 0.5
    vflip_prob: float = 0.0
    rotation_choices: tuple | None = (0, 90, 180, 270)
    resize_range: tuple | None = (0.8, 1.2)
    samples_per_step: int = 1

    def __post_init__(self):
        if not 0.0 <= self.hflip_prob <= 1.0 or not 0.0 <= self.vflip_prob <= 1.0:
            raise ContractViolationError("flip probabilities must be in [0, 1]")
        if self.rotation_choices is not None:
            choices = tuple(self.rotation_choices)
            if len(choices) == 0:
                raise ContractViolationError("rotation_choices is empty; use None to disable")
            if any(c % 90 for c in choices):
                raise ContractViolationError(
                    f"rotation choices must be multiples of 90, got {choices}"
                )
            object.__setattr__(self, "rotation_choices", choices)
        if self.resize_range is not None:
            lo, hi = self.resize_range
            if not (0 < lo <= hi):
                raise ContractViolationError(f"bad resize range ({lo}, {hi})")
            object.__setattr__(self, "resize_range", (float(lo), float(hi)))
        if self.samples_per_step < 1:
            raise ContractViolationError("samples_per_step must be >= 1")

    @classmethod
    def identity(cls) -> "TransformConfig":
        return cls(hflip_prob=0.0, vflip_prob=0.0, rotation_choices=None,
                   resize_range=None, samples_per_step=1)


def sample_transform(rng: np.random.Generator, config: TransformConfig) -> TransformPair:
    """Draw one TransformPair; an all-disabled config yields the identity pair."""
    seed = int(rng.integers(0, 2**63 - 1))
    sub = np.random.default_rng(seed)
    flip_h = bool(config.hflip_prob > 0 and sub.random() < config.hflip_prob)
    flip_v = bool(config.vflip_prob > 0 and sub.random() < config.vflip_prob)
    quarter = 0
    if config.rotation_choices is not None:
        quarter = (int(sub.choice(np.asarray(config.rotation_choices))) // 90) % 4
    scale = 1.0
    if config.resize_range is not None:
        scale = float(sub.uniform(*config.resize_range))
    return TransformPair(flip_h=flip_h, flip_v=flip_v, quarter_turns=quarter,
                         scale=scale, seed=seed)


def _zoom_indices(n: int, scale: float) -> np.ndarray:
    """Per output cell, the source cell of a center-anchored NN zoom; -1 = outside."""
    center = (n - 1) / 2.0
    src = np.floor((np.arange(n) - center) / scale + center + 0.5).astype(np.int64)
    src[(src < 0) | (src >= n)] = -1
    return src


def grid_source_indices(t: TransformPair, grid_hw) -> np.ndarray:
    """Flattened source index per output grid cell (-1 where zero-filled).

    This single map defines the transform at any raster; images apply it at
    patch-block granularity, features apply it to columns.
    """
    gh, gw = grid_hw
    idx = np.arange(gh * gw, dtype=np.int64).reshape(gh, gw)
    if t.flip_h:
        idx = idx[:, ::-1]
    if t.flip_v:
        idx = idx[::-1, :]
    k = t.quarter_turns % 4
    if k:
        if k % 2 == 1 and gh != gw:
            raise ContractViolationError(
                f"rotation by 90/270 degrees requires a square raster, got {gh}x{gw}"
            )
        idx = np.rot90(idx, k)
    if t.scale != 1.0:
        rows = _zoom_indices(idx.shape[0], t.scale)
        cols = _zoom_indices(idx.shape[1], t.scale)
        out = np.full_like(idx, -1)
        rok, cok = rows >= 0, cols >= 0
        out[np.ix_(rok, cok)] = idx[rows[rok]][:, cols[cok]]
        idx = out
    return np.ascontiguousarray(idx).ravel()


def apply_image_transform(t: TransformPair, x, grid_hw=None) -> ImageTensor:
    """Apply the pair's geometry to an image; output keeps the input resolution.

    ``grid_hw`` is the paired backend's patch grid; the zoom component moves
    whole patch blocks so the feature-space version matches exactly. When
    omitted, the zoom operates at pixel granularity.
    """
    arr = as_image_array(x)
    h, w, c = arr.shape
    if t.flip_h:
        arr = arr[:, ::-1, :]
    if t.flip_v:
        arr = arr[::-1, :, :]
    k = t.quarter_turns % 4
    if k:
        if k % 2 == 1 and h != w:
            raise ContractViolationError(
                f"rotation by 90/270 degrees requires a square image, got {h}x{w}"
            )
        arr = np.rot90(arr, k, axes=(0, 1))
    if t.scale != 1.0:
        gh, gw = grid_hw if grid_hw is not None else (h, w)
        if h % gh or w % gw:
            raise ContractViolationError(f"grid {(gh, gw)} must divide image dims {(h, w)}")
        bh, bw = h // gh, w // gw
        blocks = arr.reshape(gh, bh, gw, bw, c)
        src = grid_source_indices(
            TransformPair(scale=t.scale), (gh, gw)
        ).reshape(gh, gw)
        out = np.zeros_like(blocks)
        valid = src >= 0
        rows, cols = np.nonzero(valid)
        flat = src[valid]
        out[rows, :, cols, :, :] = blocks[flat // gw, :, flat % gw, :, :]
        arr = out.reshape(h, w, c)
    return ImageTensor(np.ascontiguousarray(arr))


def apply_feature_transform(t: TransformPair, f: np.ndarray, grid_hw) -> np.ndarray:
    """Reindex patch columns by the grid-resolution geometry.

    ``f`` is the (N_f, N_h*N_w) patch block only; the CLS column is never
    part of the input. Zero-filled cells get zero columns.
    """
    gh, gw = grid_hw
    f = np.asarray(f, dtype=np.float64)
    if f.ndim != 2 or f.shape[1] != gh * gw:
        raise ContractViolationError(
            f"patch feature block must be (N_f, {gh * gw}), got {f.shape}"
        )
    src = grid_source_indices(t, grid_hw)
    out = np.zeros_like(f)
    sel = src >= 0
    out[:, sel] = f[:, src[sel]]
    return out


def feature_transform_vjp(t: TransformPair, cotangent: np.ndarray, grid_hw) -> np.ndarray:
    """Adjoint of ``apply_feature_transform`` (scatter-add back to sources)."""
    gh, gw = grid_hw
    cot = np.asarray(cotangent, dtype=np.float64)
    if cot.ndim != 2 or cot.shape[1] != gh * gw:
        raise ContractViolationError(
            f"cotangent must be (N_f, {gh * gw}), got {cot.shape}"
        )
    src = grid_source_indices(t, grid_hw)
    sel = src >= 0
    grad_t = np.zeros((cot.shape[1], cot.shape[0]))
    np.add.at(grad_t, src[sel], cot.T[sel])
    return grad_t.T
