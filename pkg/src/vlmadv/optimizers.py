"""Iterative signed-gradient attacks and the contrastive transform-resampling loop.

All optimizers minimize the supplied objective (the targeted direction);
untargeted runs are expressed by negating the objective. Every step ends
with the same projection onto the l-inf ball intersected with the valid
pixel box, so feasibility holds for every intermediate iterate.

Step rules beyond the plain iterative method follow their originating
formulations: momentum over l1-normalized gradients (MI, Dong et al. 2018),
Nesterov lookahead (NI) and scale-invariant gradient averaging over x/2^i
copies (SI-NI, Lin et al. 2020), patch-wise amplification with cut-noise
projection (PI and its momentum variant, Gao et al. 2020), and variance
tuning by uniform neighborhood sampling (VMI, Wang & He 2021).
"""

from __future__ import annotations

from dataclasses import dataclass, replace as dc_replace

import numpy as np
from scipy import ndimage

from .augmentation import TransformConfig, sample_transform
from .exceptions import (
    AttackRuntimeError,
    ContractViolationError,
    DeadGradientError,
    IncompatibleMethodError,
    VlmAdvError,
)
from .objectives import (
    ContrastiveObjective,
    FeatureMatchObjective,
    LatentObjective,
    negated,
)
from .types import (
    AttackConfig,
    AttackResult,
    ImageTensor,
    Perturbation,
    as_image_array,
    compose,
    project_linf,
)

MOMENTUM_VARIANTS = ("mi", "ni", "sini", "pi", "pipp")
METHOD_IDS = (
    "ifgsm", "mifgsm", "nifgsm", "sinifgsm", "pifgsm", "pifgsmpp",
    "vmifgsm", "contrastive_adv", "contrastive_adv_vmi",
)
OBJECTIVE_IDS = ("latent", "feature_match", "contrastive")

_DEAD_STEP_LIMIT = 5
_FEAS_TOL = 1e-9


@dataclass(frozen=True)
class OptimizerState:
    """State threaded through one attack run."""

    base: np.ndarray
    delta: np.ndarray
    momentum: np.ndarray
    variance: np.ndarray
    amplification: np.ndarray
    t: int = 0
    dead_steps: int = 0
    last_value: float = float("nan")

    @classmethod
    def initial(cls, base) -> "OptimizerState":
        b = as_image_array(base)
        z = np.zeros_like(b)
        return cls(base=b, delta=z.copy(), momentum=z.copy(),
                   variance=z.copy(), amplification=z.copy())


def _l1(a: np.ndarray) -> float:
    return float(np.sum(np.abs(a)))


def _check_feasible(base, delta, epsilon):
    # internal invariant; a violation here is an optimizer bug
    if float(np.max(np.abs(delta))) > epsilon + _FEAS_TOL:
        raise RuntimeError("iterate left the l-inf ball")
    x = base + delta
    if float(x.min()) < -_FEAS_TOL or float(x.max()) > 1.0 + _FEAS_TOL:
        raise RuntimeError("iterate left the valid pixel box")


def _project_kernel(size: int) -> np.ndarray:
    kern = np.ones((size, size)) / (size * size - 1)
    kern[size // 2, size // 2] = 0.0
    return kern


def _neighbourhood_conv(cut: np.ndarray, size: int) -> np.ndarray:
    kern = _project_kernel(size)
    return np.stack(
        [ndimage.convolve(cut[..., c], kern, mode="constant", cval=0.0)
         for c in range(cut.shape[-1])],
        axis=-1,
    )


def momentum_family_step(variant, state: OptimizerState, x_t, objective,
                         cfg: AttackConfig):
    """One step of the MI / NI / SI-NI / PI / PI++ family.

    Returns ``(x_next, state_next)``; the step's objective value is recorded
    in ``state_next.last_value``. The NI-family value is evaluated at the
    lookahead point, which coincides with the iterate when momentum is zero.
    """
    if variant not in MOMENTUM_VARIANTS:
        raise ContractViolationError(
            f"unknown variant {variant!r}; expected one of {MOMENTUM_VARIANTS}"
        )
    x_t = np.asarray(x_t, dtype=np.float64)
    mu = cfg.momentum_weight
    move = None
    new_momentum = state.momentum
    new_amp = state.amplification
    dead = False

    if variant in ("mi", "ni", "sini"):
        if variant == "mi":
            eval_point = x_t
        else:
            eval_point = x_t - cfg.alpha * mu * state.momentum
        if variant == "sini":
            value = None
            total = np.zeros_like(x_t)
            for i in range(cfg.sini_scales):
                scale = 2.0**i
                v, g = objective.value_and_grad(eval_point / scale)
                if i == 0:
                    value = v
                total += g / scale
            grad = total / cfg.sini_scales
        else:
            value, grad = objective.value_and_grad(eval_point)
        norm = _l1(grad)
        dead = norm == 0.0
        unit = grad / norm if norm > 0 else np.zeros_like(grad)
        new_momentum = mu * state.momentum + unit
        move = -cfg.alpha * np.sign(new_momentum)

    else:  # pi / pipp
        value, grad = objective.value_and_grad(x_t)
        dead = not np.any(grad)
        if variant == "pipp":
            norm = _l1(grad)
            unit = grad / norm if norm > 0 else np.zeros_like(grad)
            new_momentum = mu * state.momentum + unit
            direction = -np.sign(new_momentum)
        else:
            direction = -np.sign(grad)
        amp_step = cfg.pi_amplification * cfg.alpha
        new_amp = state.amplification + amp_step * direction
        cut = np.clip(np.abs(new_amp) - cfg.epsilon, 0.0, None) * np.sign(new_amp)
        projection = amp_step * np.sign(_neighbourhood_conv(cut, cfg.pi_kernel_size))
        new_amp = new_amp + projection
        move = amp_step * direction + projection

    new_delta = project_linf(state.base, state.delta + move, cfg.epsilon).delta
    x_next = state.base + new_delta
    state_next = dc_replace(
        state, delta=new_delta, momentum=new_momentum, amplification=new_amp,
        t=state.t + 1, dead_steps=state.dead_steps + 1 if dead else 0,
        last_value=float(value),
    )
    return x_next, state_next


def _run_loop(x, objective, cfg: AttackConfig, step, *, final_value, on_step=None):
    """Shared driver: iterate, trace, guard feasibility, wrap failures."""
    base = as_image_array(x)
    ImageTensor(base)  # validate the starting point
    state = OptimizerState.initial(base)
    trace = []
    for t in range(cfg.steps):
        x_t = base + state.delta
        try:
            x_next, state = step(t, x_t, state)
        except VlmAdvError:
            raise
        except Exception as exc:
            raise AttackRuntimeError(t, trace, exc) from exc
        trace.append(state.last_value)
        if state.dead_steps >= _DEAD_STEP_LIMIT:
            raise DeadGradientError(t, trace)
        _check_feasible(base, state.delta, cfg.epsilon)
        if on_step is not None:
            on_step(t, x_next)
    trace.append(float(final_value(base + state.delta)))
    pert = Perturbation(delta=state.delta, epsilon=cfg.epsilon)
    return AttackResult(
        perturbation=pert,
        adversarial_image=compose(base, pert),
        loss_trace=tuple(trace),
        config_echo=cfg,
    )


def i_fgsm(x, objective, cfg: AttackConfig, *, on_step=None) -> AttackResult:
    """Plain iterative signed-gradient descent under the l-inf budget."""

    def step(t, x_t, state):
        value, grad = objective.value_and_grad(x_t)
        dead = not np.any(grad)
        new_delta = project_linf(
            state.base, state.delta - cfg.alpha * np.sign(grad), cfg.epsilon
        ).delta
        state = dc_replace(state, delta=new_delta, t=t + 1,
                           dead_steps=state.dead_steps + 1 if dead else 0,
                           last_value=float(value))
        return state.base + new_delta, state

    return _run_loop(x, objective, cfg, step, final_value=objective.value,
                     on_step=on_step)


def _momentum_run(variant):
    def run(x, objective, cfg: AttackConfig, *, on_step=None) -> AttackResult:
        def step(t, x_t, state):
            return momentum_family_step(variant, state, x_t, objective, cfg)

        return _run_loop(x, objective, cfg, step, final_value=objective.value,
                         on_step=on_step)

    return run


mi_fgsm = _momentum_run("mi")
ni_fgsm = _momentum_run("ni")
sini_fgsm = _momentum_run("sini")
pi_fgsm = _momentum_run("pi")
pi_fgsm_pp = _momentum_run("pipp")


def _vmi_direction(x_t, grad, objective, cfg, rng, state):
    """Variance-tuned momentum direction; returns (momentum', move, dead)."""
    if cfg.vmi_beta > 0.0:
        radius = cfg.vmi_beta * cfg.epsilon
        acc = np.zeros_like(grad)
        for _ in range(cfg.vmi_samples):
            r = rng.uniform(-radius, radius, size=x_t.shape)
            acc += objective.value_and_grad(x_t + r)[1]
        variance = acc / cfg.vmi_samples - grad
    else:
        variance = np.zeros_like(grad)
    numerator = grad + variance
    norm = _l1(numerator)
    dead = norm == 0.0
    unit = numerator / norm if norm > 0 else np.zeros_like(numerator)
    momentum = cfg.momentum_weight * state.momentum + unit
    return momentum, -cfg.alpha * np.sign(momentum), variance, dead


def vmi_fgsm(x, objective, cfg: AttackConfig, *, rng=None, on_step=None) -> AttackResult:
    """Variance-tuned momentum attack.

    Each step estimates the gradient variance by Monte-Carlo over
    ``vmi_samples`` uniform draws from the beta*epsilon neighborhood of the
    current iterate and folds it into the l1-normalized momentum update.
    """
    rng = np.random.default_rng(cfg.seed) if rng is None else rng

    def step(t, x_t, state):
        value, grad = objective.value_and_grad(x_t)
        momentum, move, variance, dead = _vmi_direction(
            x_t, grad, objective, cfg, rng, state
        )
        new_delta = project_linf(state.base, state.delta + move, cfg.epsilon).delta
        state = dc_replace(state, delta=new_delta, momentum=momentum,
                           variance=variance, t=t + 1,
                           dead_steps=state.dead_steps + 1 if dead else 0,
                           last_value=float(value))
        return state.base + new_delta, state

    return _run_loop(x, objective, cfg, step, final_value=objective.value,
                     on_step=on_step)


def contrastive_adv(x, target, cfg: AttackConfig, step_rule: str = "sign", *,
                    vis_backend, transform_config: TransformConfig | None = None,
                    norm: str = "fro", rng=None, on_step=None) -> AttackResult:
    """Transform-resampling triplet attack.

    Per iteration: draw fresh transform pairs, evaluate the contrastive
    objective at x' = x + delta, step against the gradient sign (or with the
    variance-tuned momentum rule when ``step_rule="vmi"``), then project the
    delta back to the feasible set.
    """
    if step_rule not in ("sign", "vmi"):
        raise ContractViolationError(f"unknown step rule {step_rule!r}")
    tcfg = transform_config if transform_config is not None else TransformConfig()
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    parent = ContrastiveObjective(
        vis_backend, x, target.target_image, cfg.triplet_weight, norm
    )

    def bind_fresh():
        bounds = [parent.bind(sample_transform(rng, tcfg))
                  for _ in range(tcfg.samples_per_step)]

        class _Averaged:
            def value_and_grad(self, xx):
                vals, grads = zip(*(b.value_and_grad(xx) for b in bounds))
                return (float(sum(vals)) / len(bounds),
                        sum(grads) / len(bounds))

            def value(self, xx):
                return float(sum(b.value(xx) for b in bounds)) / len(bounds)

        return _Averaged()

    def step(t, x_t, state):
        objective = bind_fresh()
        value, grad = objective.value_and_grad(x_t)
        if step_rule == "sign":
            dead = not np.any(grad)
            move = -cfg.alpha * np.sign(grad)
            momentum, variance = state.momentum, state.variance
        else:
            momentum, move, variance, dead = _vmi_direction(
                x_t, grad, objective, cfg, rng, state
            )
        new_delta = project_linf(state.base, state.delta + move, cfg.epsilon).delta
        state = dc_replace(state, delta=new_delta, momentum=momentum,
                           variance=variance, t=t + 1,
                           dead_steps=state.dead_steps + 1 if dead else 0,
                           last_value=float(value))
        return state.base + new_delta, state

    return _run_loop(x, None, cfg, step,
                     final_value=lambda x_fin: bind_fresh().value(x_fin),
                     on_step=on_step)


# -- dispatch --------------------------------------------------------------

_FGSM_RUNNERS = {
    "ifgsm": i_fgsm,
    "mifgsm": mi_fgsm,
    "nifgsm": ni_fgsm,
    "sinifgsm": sini_fgsm,
    "pifgsm": pi_fgsm,
    "pifgsmpp": pi_fgsm_pp,
    "vmifgsm": vmi_fgsm,
}

_COMPATIBLE = {
    **{m: ("latent", "feature_match") for m in _FGSM_RUNNERS},
    "contrastive_adv": ("contrastive",),
    "contrastive_adv_vmi": ("contrastive",),
}


def run_attack(x, spec_or_prompt, method_id: str, objective_id: str,
               cfg: AttackConfig, *, vis_backend, text_backend=None,
               seg_backend=None, inpaint_backend=None, seg_threshold=0.5,
               seg_margin=0, transform_config=None, replace_cache=None,
               norm: str = "fro", untargeted: bool = False,
               on_step=None) -> AttackResult:
    """Resolve the (method, objective) pair, build the target if the
    objective needs one, and run the attack. Deterministic for a fixed
    config seed and toy backends."""
    from .replace import ReplaceOutput, replace as run_replace
    from .types import TargetSpec

    if method_id not in METHOD_IDS:
        raise IncompatibleMethodError(
            f"unknown method {method_id!r}; known: {METHOD_IDS}"
        )
    if objective_id not in OBJECTIVE_IDS:
        raise IncompatibleMethodError(
            f"unknown objective {objective_id!r}; known: {OBJECTIVE_IDS}"
        )
    if objective_id not in _COMPATIBLE[method_id]:
        raise IncompatibleMethodError(
            f"objective {objective_id!r} is not applicable with method "
            f"{method_id!r}; the transform-resampling loop only optimizes the "
            f"contrastive loss, and the sign-gradient family takes the latent "
            f"or feature-match losses (supported: {_COMPATIBLE[method_id]})"
        )

    target = None
    if objective_id in ("feature_match", "contrastive"):
        if isinstance(spec_or_prompt, ReplaceOutput):
            target = spec_or_prompt
        elif isinstance(spec_or_prompt, TargetSpec):
            target = run_replace(
                x, spec_or_prompt, seg_backend=seg_backend,
                inpaint_backend=inpaint_backend, vis_backend=vis_backend,
                threshold=seg_threshold, margin=seg_margin, cache=replace_cache,
            )
        else:
            raise ContractViolationError(
                "feature objectives need a TargetSpec or a ReplaceOutput"
            )

    if method_id in ("contrastive_adv", "contrastive_adv_vmi"):
        if untargeted:
            raise IncompatibleMethodError(
                "the contrastive loop is targeted by construction"
            )
        return contrastive_adv(
            x, target, cfg,
            step_rule="vmi" if method_id.endswith("_vmi") else "sign",
            vis_backend=vis_backend, transform_config=transform_config,
            norm=norm, on_step=on_step,
        )

    if objective_id == "latent":
        if isinstance(spec_or_prompt, TargetSpec):
            prompt = spec_or_prompt.target_prompt
        elif isinstance(spec_or_prompt, str):
            prompt = spec_or_prompt
        else:
            raise ContractViolationError("latent objective needs a prompt or TargetSpec")
        if text_backend is None:
            raise ContractViolationError("latent objective needs a text backend")
        objective = LatentObjective(vis_backend, text_backend, prompt)
    else:
        objective = FeatureMatchObjective(vis_backend, target.target_features, norm)

    if untargeted:
        objective = negated(objective)
    return _FGSM_RUNNERS[method_id](x, objective, cfg, on_step=on_step)
