"""Core domain types and the constraint geometry shared by every attack.

The decision variable of all attacks is an image in the normalized pixel
domain [0, 1]; budgets are fractions such as 16/255. The feasible set is
the intersection of the l-inf ball around the base image with the valid
pixel box, and ``project_linf`` is the single projection used everywhere.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .exceptions import ContractViolationError


def as_image_array(x) -> np.ndarray:
    """Return the underlying (H, W, C) float64 array of an image-like input."""
    if isinstance(x, ImageTensor):
        return x.data
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 3:
        raise ContractViolationError(f"expected (H, W, C) array, got shape {arr.shape}")
    return arr


@dataclass(frozen=True)
class ImageTensor:
    """An (H, W, C) image with finite entries in [0, 1].

    The array is copied and frozen at construction; instances are safe to
    share across concurrent workers.
    """

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float64)
        if arr.ndim != 3 or min(arr.shape) < 1:
            raise ContractViolationError(
                f"image must be (H, W, C) with positive dims, got {arr.shape}"
            )
        if not np.all(np.isfinite(arr)):
            raise ContractViolationError("image contains non-finite values")
        if float(arr.min()) < 0.0 or float(arr.max()) > 1.0:
            raise ContractViolationError(
                f"image values must lie in [0, 1], got range "
                f"[{arr.min():.6g}, {arr.max():.6g}]"
            )
        arr = arr.copy()
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    @property
    def shape(self) -> tuple:
        return self.data.shape


@dataclass(frozen=True)
class Perturbation:
    """An additive image delta bounded by ``epsilon`` in l-inf norm.

    Instances produced by ``project_linf`` additionally keep the perturbed
    image inside [0, 1]; ``compose`` relies on that.
    """

    delta: np.ndarray
    epsilon: float

    def __post_init__(self):
        arr = np.asarray(self.delta, dtype=np.float64)
        if arr.ndim != 3:
            raise ContractViolationError(f"delta must be (H, W, C), got {arr.shape}")
        if self.epsilon <= 0:
            raise ContractViolationError("epsilon must be positive")
        if not np.all(np.isfinite(arr)):
            raise ContractViolationError("delta contains non-finite values")
        if float(np.max(np.abs(arr))) > self.epsilon:
            raise ContractViolationError(
                f"|delta| exceeds epsilon: {np.max(np.abs(arr)):.8g} > {self.epsilon:.8g}"
            )
        arr = arr.copy()
        arr.flags.writeable = False
        object.__setattr__(self, "delta", arr)

    @property
    def linf_norm(self) -> float:
        return float(np.max(np.abs(self.delta)))


def project_linf(base, delta, epsilon: float) -> Perturbation:
    """Project ``delta`` onto {|d| <= epsilon} intersected with {base + d in [0, 1]}.

    Implemented as an exact per-coordinate interval clip, so the result is
    idempotent under re-projection and leaves already-feasible coordinates
    bit-identical.
    """
    b = as_image_array(base)
    d = np.asarray(delta, dtype=np.float64)
    if d.shape != b.shape:
        raise ContractViolationError(f"shape mismatch: base {b.shape} vs delta {d.shape}")
    if not epsilon > 0:
        raise ContractViolationError("epsilon must be positive")
    lo = np.maximum(-epsilon, -b)
    hi = np.minimum(epsilon, 1.0 - b)
    return Perturbation(delta=np.clip(d, lo, hi), epsilon=float(epsilon))


def compose(base, p: Perturbation) -> ImageTensor:
    """Return the perturbed image ``base + delta`` clamped to the valid box.

    The clamp only absorbs last-ulp rounding; for perturbations built by
    ``project_linf`` the sum already lies in [0, 1].
    """
    b = as_image_array(base)
    if p.delta.shape != b.shape:
        raise ContractViolationError(f"shape mismatch: base {b.shape} vs delta {p.delta.shape}")
    return ImageTensor(np.clip(b + p.delta, 0.0, 1.0))


def quantize_8bit(x) -> ImageTensor:
    """Snap an image to the 8-bit grid (k/255); saved artifacts are evaluated on this."""
    arr = as_image_array(x)
    return ImageTensor(np.round(arr * 255.0) / 255.0)


@dataclass(frozen=True)
class AttackConfig:
    """Hyperparameters shared by the iterative attacks.

    ``momentum_weight`` is the momentum decay of the signed-gradient family
    and ``triplet_weight`` is the negative-term weight of the contrastive
    loss; they are distinct knobs even though both are conventionally
    written as mu.
    """

    epsilon: float = 16.0 / 255.0
    alpha: float = 1.0 / 255.0
    steps: int = 200
    momentum_weight: float = 1.0
    triplet_weight: float = 0.3
    vmi_beta: float = 1.5
    vmi_samples: int = 20
    sini_scales: int = 5
    seed: int = 0
    # patch-wise variants only; defaults follow the original method's settings
    pi_amplification: float = 10.0
    pi_kernel_size: int = 3

    def __post_init__(self):
        if not (0.0 < self.alpha <= self.epsilon <= 1.0):
            raise ContractViolationError(
                f"need 0 < alpha <= epsilon <= 1, got alpha={self.alpha}, epsilon={self.epsilon}"
            )
        if self.steps < 1:
            raise ContractViolationError("steps must be >= 1")
        if self.momentum_weight < 0 or self.triplet_weight < 0 or self.vmi_beta < 0:
            raise ContractViolationError("weights must be non-negative")
        if self.vmi_samples < 1 or self.sini_scales < 1:
            raise ContractViolationError("sample/scale counts must be >= 1")
        if self.pi_amplification <= 0 or self.pi_kernel_size < 3 or self.pi_kernel_size % 2 == 0:
            raise ContractViolationError("pi_amplification must be > 0, pi_kernel_size odd >= 3")


@dataclass(frozen=True)
class TargetSpec:
    """What to attack: the object to remove (``target_object``) and the
    prompt describing its replacement (``target_prompt``)."""

    target_object: str
    target_prompt: str

    def __post_init__(self):
        if not self.target_object or not self.target_object.strip():
            raise ContractViolationError("target_object must be non-empty")
        if not self.target_prompt or not self.target_prompt.strip():
            raise ContractViolationError("target_prompt must be non-empty")


@dataclass(frozen=True)
class AttackResult:
    """Everything an optimizer run produces."""

    perturbation: Perturbation
    adversarial_image: ImageTensor
    loss_trace: tuple
    config_echo: AttackConfig

    def __post_init__(self):
        trace = tuple(float(v) for v in self.loss_trace)
        if not all(np.isfinite(trace)):
            raise ContractViolationError("loss trace contains non-finite values")
        object.__setattr__(self, "loss_trace", trace)
