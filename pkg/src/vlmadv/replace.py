"""Target synthesis: segment the object, mask it out, inpaint with the
prompt, and re-encode to get target patch features.

Mask polarity: the target-object region is 0 and the background is 1, so
masking preserves the background and the inpainting backend fills {m=0}.
Target images are snapped to the 8-bit grid before encoding, matching the
on-disk artifact that evaluation sees.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import storage
from .encoders.base import VisualBackend, encode_image, patch_features
from .exceptions import (
    ContractViolationError,
    PipelineStageError,
    TargetNotFoundError,
)
from .registry import INPAINTING_BACKENDS, SEGMENTATION_BACKENDS
from .types import ImageTensor, TargetSpec, as_image_array, quantize_8bit


@dataclass(frozen=True)
class BinaryMask:
    """(H, W) array of {0, 1}: 0 marks the target object, 1 the background."""

    grid: np.ndarray

    def __post_init__(self):
        g = np.asarray(self.grid)
        if g.ndim != 2:
            raise ContractViolationError(f"mask must be 2-D, got {g.shape}")
        if not np.isin(g, (0, 1)).all():
            raise ContractViolationError("mask entries must be exactly 0 or 1")
        g = g.astype(np.uint8)
        g.flags.writeable = False
        object.__setattr__(self, "grid", g)

    @property
    def zero_region_size(self) -> int:
        return int((self.grid == 0).sum())


@dataclass(frozen=True)
class ReplaceOutput:
    """Synthesized target: image, its patch features, and the mask used."""

    target_image: ImageTensor
    target_features: np.ndarray
    mask: BinaryMask

    def __post_init__(self):
        f = np.asarray(self.target_features, dtype=np.float64)
        if f.ndim != 2:
            raise ContractViolationError("target_features must be (N_f, N_h*N_w)")
        object.__setattr__(self, "target_features", f)


class SegmentationBackend:
    """Text-conditioned per-pixel probability of the target object."""

    backend_id = "abstract-seg"

    def probability_map(self, x, target_object: str) -> np.ndarray:
        raise NotImplementedError


@SEGMENTATION_BACKENDS.register("static")
class StaticSegmentationBackend(SegmentationBackend):
    """Returns a fixed probability map regardless of inputs (test fixture)."""

    backend_id = "static"

    def __init__(self, prob_map):
        self.prob_map = np.asarray(prob_map, dtype=np.float64)

    def probability_map(self, x, target_object):
        return self.prob_map


@SEGMENTATION_BACKENDS.register("centerbox")
class CenterBoxSegmentationBackend(SegmentationBackend):
    """Probability 1 inside a centered box covering ``box_frac`` of each
    dimension; a deterministic stand-in for a text-guided segmenter."""

    backend_id = "centerbox"

    def __init__(self, box_frac=0.5):
        if not 0 < box_frac <= 1:
            raise ContractViolationError("box_frac must be in (0, 1]")
        self.box_frac = float(box_frac)

    def probability_map(self, x, target_object):
        h, w, _ = as_image_array(x).shape
        prob = np.zeros((h, w))
        bh, bw = max(1, round(h * self.box_frac)), max(1, round(w * self.box_frac))
        top, left = (h - bh) // 2, (w - bw) // 2
        prob[top:top + bh, left:left + bw] = 1.0
        return prob


class InpaintingBackend:
    """Fills the {m=0} region of an image conditioned on a text prompt."""

    backend_id = "abstract-inpaint"
    # max |out - x| allowed on the background for this backend
    background_tolerance = 0.0

    def fill(self, x, mask: BinaryMask, prompt: str) -> np.ndarray:
        raise NotImplementedError


@INPAINTING_BACKENDS.register("constant")
class ConstantFillInpainter(InpaintingBackend):
    """out = m*x + (1-m)*c for a fixed fill value c."""

    backend_id = "constant"
    background_tolerance = 0.0

    def __init__(self, value=0.5):
        if not 0.0 <= value <= 1.0:
            raise ContractViolationError("fill value must be in [0, 1]")
        self.value = float(value)

    def fill(self, x, mask, prompt):
        arr = as_image_array(x)
        m = mask.grid[:, :, None].astype(np.float64)
        return m * arr + (1.0 - m) * self.value


@INPAINTING_BACKENDS.register("prompt_hash")
class PromptHashInpainter(InpaintingBackend):
    """Fills with a flat color derived deterministically from the prompt, so
    different prompts produce different target content."""

    backend_id = "prompt_hash"
    background_tolerance = 0.0

    def __init__(self, seed=0):
        self.seed = int(seed)

    def fill(self, x, mask, prompt):
        from .encoders.toy import _hash_floats

        arr = as_image_array(x)
        color = 0.1 + 0.8 * _hash_floats(f"inpaint:{self.seed}:{prompt}", arr.shape[2])
        m = mask.grid[:, :, None].astype(np.float64)
        return m * arr + (1.0 - m) * color


def segment_target(x, target_object: str, backend: SegmentationBackend, *,
                   threshold: float = 0.5, margin: int = 0) -> BinaryMask:
    """Threshold the backend's probability map into a target mask.

    Pixels with probability >= threshold become the target region (0);
    ``margin`` dilates that region to absorb boundary artifacts. Raises
    TargetNotFoundError when no pixel clears the threshold.
    """
    arr = as_image_array(x)
    if not target_object or not target_object.strip():
        raise ContractViolationError("target_object must be non-empty")
    prob = np.asarray(backend.probability_map(x, target_object), dtype=np.float64)
    if prob.shape != arr.shape[:2]:
        raise ContractViolationError(
            f"probability map {prob.shape} does not match image {arr.shape[:2]}"
        )
    target = prob >= threshold
    if not target.any():
        raise TargetNotFoundError(
            f"no pixel reached probability {threshold} for object {target_object!r}"
        )
    if margin > 0:
        target = ndimage.binary_dilation(target, iterations=margin)
    return BinaryMask(grid=(~target).astype(np.uint8))


def apply_mask(x, m: BinaryMask) -> ImageTensor:
    """Zero the target region: elementwise product with the mask, broadcast
    across channels."""
    arr = as_image_array(x)
    if m.grid.shape != arr.shape[:2]:
        raise ContractViolationError(
            f"mask {m.grid.shape} does not match image {arr.shape[:2]}"
        )
    return ImageTensor(arr * m.grid[:, :, None])


def inpaint(x, m: BinaryMask, prompt: str, backend: InpaintingBackend) -> ImageTensor:
    """Fill the target region with prompt-conditioned content.

    The backend receives the full image plus the mask so generative models
    can use the surrounding context; stub backends reproduce the literal
    masked composition. The background must agree with x within the
    backend's documented tolerance (exactly, for stubs).
    """
    arr = as_image_array(x)
    if m.grid.shape != arr.shape[:2]:
        raise ContractViolationError(
            f"mask {m.grid.shape} does not match image {arr.shape[:2]}"
        )
    if m.zero_region_size == 0:
        raise ContractViolationError("mask has an empty fill region (all ones)")
    if not prompt or not prompt.strip():
        raise ContractViolationError("prompt must be non-empty")
    out = np.asarray(backend.fill(x, m, prompt), dtype=np.float64)
    if out.shape != arr.shape:
        raise ContractViolationError(
            f"inpainting backend returned {out.shape}, expected {arr.shape}"
        )
    return ImageTensor(np.clip(out, 0.0, 1.0))


class ReplaceCache:
    """Disk cache of replace() outputs.

    Layout: one subdirectory per content key holding target.png (8-bit RGB),
    features.bin (little-endian float32 with an N_f/N_h/N_w header), and
    provenance.json (backend ids, threshold, margin, prompt texts). In-memory
    features are recomputed from the cached PNG, so hits return bit-identical
    values to the call that populated them.
    """

    def __init__(self, root):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)

    def key(self, x, spec: TargetSpec, backend_ids, threshold, margin) -> str:
        import hashlib

        h = hashlib.sha256()
        h.update(storage.content_hash(x).encode())
        for part in (spec.target_object, spec.target_prompt, *backend_ids,
                     f"{threshold!r}", f"{margin!r}"):
            h.update(b"\x00" + str(part).encode("utf-8"))
        return h.hexdigest()

    def load(self, key: str, vis_backend: VisualBackend):
        entry = self.root / key
        if not (entry / "provenance.json").exists():
            return None
        image = storage.load_png(entry / "target.png")
        prov = json.loads((entry / "provenance.json").read_text())
        mask = BinaryMask(grid=np.asarray(prov["mask"], dtype=np.uint8))
        feats = patch_features(encode_image(vis_backend, image))
        return ReplaceOutput(target_image=image, target_features=feats, mask=mask)

    def store(self, key: str, out: ReplaceOutput, spec: TargetSpec,
              backend_ids, threshold, margin, grid_hw) -> None:
        entry = self.root / key
        entry.mkdir(parents=True, exist_ok=True)
        storage.save_png(out.target_image, entry / "target.png")
        storage.save_feature_file(out.target_features, grid_hw, entry / "features.bin")
        prov = {
            "backend_ids": list(backend_ids),
            "threshold": threshold,
            "margin": margin,
            "target_object": spec.target_object,
            "target_prompt": spec.target_prompt,
            "mask": out.mask.grid.tolist(),
        }
        (entry / "provenance.json").write_text(json.dumps(prov, sort_keys=True))


def replace(x, spec: TargetSpec, *, seg_backend, inpaint_backend,
            vis_backend: VisualBackend, threshold: float = 0.5, margin: int = 0,
            cache: ReplaceCache | None = None) -> ReplaceOutput:
    """Full target synthesis: segment -> mask -> inpaint -> encode.

    The inpainted image is quantized to 8 bits before encoding so the
    features always describe the artifact that would be saved to disk.
    Component failures are re-raised with their stage label.
    """
    if seg_backend is None or inpaint_backend is None or vis_backend is None:
        raise ContractViolationError("replace() needs segmentation, inpainting "
                                     "and visual backends")
    backend_ids = (seg_backend.backend_id, inpaint_backend.backend_id,
                   vis_backend.backend_id)
    key = None
    if cache is not None:
        key = cache.key(x, spec, backend_ids, threshold, margin)
        hit = cache.load(key, vis_backend)
        if hit is not None:
            return hit

    try:
        mask = segment_target(x, spec.target_object, seg_backend,
                              threshold=threshold, margin=margin)
    except ContractViolationError:
        raise
    except TargetNotFoundError:
        raise
    except Exception as exc:
        raise PipelineStageError("segmentation", exc) from exc

    try:
        filled = inpaint(x, mask, spec.target_prompt, inpaint_backend)
    except (ContractViolationError, PipelineStageError):
        raise
    except Exception as exc:
        raise PipelineStageError("inpainting", exc) from exc

    target_image = quantize_8bit(filled)
    try:
        feats = patch_features(encode_image(vis_backend, target_image))
    except Exception as exc:
        raise PipelineStageError("encoding", exc) from exc

    out = ReplaceOutput(target_image=target_image, target_features=feats, mask=mask)
    if cache is not None:
        cache.store(key, out, spec, backend_ids, threshold, margin,
                    vis_backend.grid_hw)
        return cache.load(key, vis_backend)
    return out
