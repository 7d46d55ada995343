"""Attack objectives: latent matching, patch-feature matching, and the
contrastive triplet. Each exposes value and input-gradient.

Feature-matrix distances default to the Frobenius norm (l2 over the
flattened patch block); ``norm="per_patch"`` switches to the sum of
per-column l2 distances. All objectives are minimized for targeted attacks;
wrap with ``negated`` for the untargeted sign flip.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .augmentation import (
    TransformPair,
    apply_feature_transform,
    apply_image_transform,
    feature_transform_vjp,
)
from .encoders.base import TextBackend, VisualBackend, encode_text
from .exceptions import ContractViolationError
from .types import as_image_array

_NORMS = ("fro", "per_patch")


def _norm_and_cotangent(diff: np.ndarray, norm: str):
    """Value and d(value)/d(diff) for the configured matrix norm.

    Zero distance is a subgradient corner; the zero cotangent is returned
    there so optimizers stop moving instead of dividing by zero.
    """
    if norm == "fro":
        val = float(np.linalg.norm(diff))
        cot = diff / val if val > 0 else np.zeros_like(diff)
        return val, cot
    if norm == "per_patch":
        col = np.linalg.norm(diff, axis=0)
        val = float(col.sum())
        safe = np.where(col > 0, col, 1.0)
        cot = np.where(col > 0, diff / safe, 0.0)
        return val, cot
    raise ContractViolationError(f"unknown norm {norm!r}; expected one of {_NORMS}")


class LatentObjective:
    """Distance between the adversarial image's projected CLS latent and the
    text latent of the target prompt."""

    kind = "latent"

    def __init__(self, vis_backend: VisualBackend, text_backend: TextBackend, prompt: str):
        if vis_backend.latent_dim != text_backend.latent_dim:
            raise ContractViolationError(
                f"latent dims differ: visual {vis_backend.latent_dim} vs "
                f"text {text_backend.latent_dim}"
            )
        self.vis = vis_backend
        self.target_vec = encode_text(text_backend, prompt).vector

    def value_and_grad(self, x):
        arr = as_image_array(x)
        feats = self.vis.encode(arr)
        cls = feats[:, 0]
        diff = self.vis.project_latent_cls(cls) - self.target_vec
        val = float(np.linalg.norm(diff))
        if val == 0.0:
            return val, np.zeros_like(arr)
        dcls = self.vis.project_latent_vjp(cls, diff / val)
        cot = np.zeros_like(feats)
        cot[:, 0] = dcls
        return val, self.vis.encode_vjp(arr, cot)

    def value(self, x) -> float:
        feats = self.vis.encode(as_image_array(x))
        return float(np.linalg.norm(self.vis.project_latent_cls(feats[:, 0]) - self.target_vec))


class FeatureMatchObjective:
    """Distance between the adversarial image's patch features and a fixed
    target patch-feature block."""

    kind = "feature_match"

    def __init__(self, vis_backend: VisualBackend, f_target: np.ndarray, norm: str = "fro"):
        self.vis = vis_backend
        self.norm = norm
        ft = np.asarray(f_target, dtype=np.float64)
        if ft.shape != (vis_backend.feature_dim, vis_backend.n_patches):
            raise ContractViolationError(
                f"target feature grid {ft.shape} does not match backend "
                f"({vis_backend.feature_dim}, {vis_backend.n_patches})"
            )
        self.f_target = ft

    def value_and_grad(self, x):
        arr = as_image_array(x)
        feats = self.vis.encode(arr)
        val, dpatch = _norm_and_cotangent(feats[:, 1:] - self.f_target, self.norm)
        cot = np.zeros_like(feats)
        cot[:, 1:] = dpatch
        return val, self.vis.encode_vjp(arr, cot)

    def value(self, x) -> float:
        feats = self.vis.encode(as_image_array(x))
        return _norm_and_cotangent(feats[:, 1:] - self.f_target, self.norm)[0]


@dataclass(frozen=True)
class ObjectiveContext:
    """Inputs shared by one attack's objective evaluations."""

    base_image: object
    target: object  # ReplaceOutput for feature objectives, LatentVector samples latent mode
    backend: VisualBackend
    triplet_weight: float = 0.3

    @property
    def backend_id(self) -> str:
        return self.backend.backend_id


class ContrastiveObjective:
    """Triplet loss under one sampled transform pair: pull the transformed
    patch features of x' toward the transformed target image's features,
    push away from the transformed original image's features.

    The perturbed branch is transformed in feature space; the clean branches
    are transformed in image space, then encoded.
    """

    kind = "contrastive"

    def __init__(self, vis_backend: VisualBackend, base_image, target_image,
                 triplet_weight: float = 0.3, norm: str = "fro"):
        self.vis = vis_backend
        self.base = as_image_array(base_image)
        self.target_image = as_image_array(target_image)
        self.mu = float(triplet_weight)
        self.norm = norm
        if self.mu < 0:
            raise ContractViolationError("triplet_weight must be >= 0")

    def bind(self, pair: TransformPair) -> "BoundContrastiveObjective":
        grid = self.vis.grid_hw
        pos_anchor = self.vis.encode(
            apply_image_transform(pair, self.target_image, grid).data
        )[:, 1:]
        neg_anchor = self.vis.encode(
            apply_image_transform(pair, self.base, grid).data
        )[:, 1:]
        return BoundContrastiveObjective(self, pair, pos_anchor, neg_anchor)


class BoundContrastiveObjective:
    """ContrastiveObjective with the per-iteration transform pair fixed and
    the clean-branch anchors precomputed."""

    kind = "contrastive"

    def __init__(self, parent: ContrastiveObjective, pair: TransformPair,
                 pos_anchor: np.ndarray, neg_anchor: np.ndarray):
        self.parent = parent
        self.pair = pair
        self.pos_anchor = pos_anchor
        self.neg_anchor = neg_anchor

    def _terms(self, arr):
        vis = self.parent.vis
        feats = vis.encode(arr)
        moved = apply_feature_transform(self.pair, feats[:, 1:], vis.grid_hw)
        pos_val, pos_cot = _norm_and_cotangent(moved - self.pos_anchor, self.parent.norm)
        neg_val, neg_cot = _norm_and_cotangent(moved - self.neg_anchor, self.parent.norm)
        return feats, pos_val, pos_cot, neg_val, neg_cot

    def value_and_grad(self, x):
        arr = as_image_array(x)
        vis = self.parent.vis
        feats, pos_val, pos_cot, neg_val, neg_cot = self._terms(arr)
        val = pos_val - self.parent.mu * neg_val
        dmoved = pos_cot - self.parent.mu * neg_cot
        dpatch = feature_transform_vjp(self.pair, dmoved, vis.grid_hw)
        cot = np.zeros_like(feats)
        cot[:, 1:] = dpatch
        return val, vis.encode_vjp(arr, cot)

    def value(self, x) -> float:
        _, pos_val, _, neg_val, _ = self._terms(as_image_array(x))
        return pos_val - self.parent.mu * neg_val


class NegatedObjective:
    """Sign-flipped wrapper: minimizing it maximizes the wrapped objective
    (the untargeted formulation)."""

    def __init__(self, inner):
        self.inner = inner
        self.kind = getattr(inner, "kind", "unknown")

    def value_and_grad(self, x):
        val, grad = self.inner.value_and_grad(x)
        return -val, -grad

    def value(self, x) -> float:
        return -self.inner.value(x)


def negated(objective):
    return NegatedObjective(objective)


# -- spec-level convenience wrappers -------------------------------------


def latent_objective(x_adv, prompt: str, vis_backend: VisualBackend,
                     text_backend: TextBackend):
    """Value and gradient of the latent-matching loss at ``x_adv``."""
    return LatentObjective(vis_backend, text_backend, prompt).value_and_grad(x_adv)


def feature_match_objective(x_adv, f_target, vis_backend: VisualBackend, norm="fro"):
    """Value and gradient of the patch-feature-matching loss at ``x_adv``."""
    return FeatureMatchObjective(vis_backend, f_target, norm).value_and_grad(x_adv)


def contrastive_objective(x_adv, ctx: ObjectiveContext, transform_pair: TransformPair,
                          norm="fro"):
    """Value and gradient of the triplet loss at ``x_adv`` for one transform pair."""
    target_image = getattr(ctx.target, "target_image", None)
    if target_image is None:
        raise ContractViolationError(
            "contrastive objective needs a replace-pipeline target with a target_image"
        )
    obj = ContrastiveObjective(
        ctx.backend, ctx.base_image, target_image, ctx.triplet_weight, norm
    )
    return obj.bind(transform_pair).value_and_grad(x_adv)
