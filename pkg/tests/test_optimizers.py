import dataclasses

import numpy as np
import pytest

from vlmadv.augmentation import TransformConfig
from vlmadv.encoders import AvgPoolBackend, HashTextBackend
from vlmadv.encoders.base import encode_image, patch_features
from vlmadv.exceptions import (
    AttackRuntimeError,
    DeadGradientError,
    IncompatibleMethodError,
)
from vlmadv.objectives import FeatureMatchObjective
from vlmadv.optimizers import (
    METHOD_IDS,
    OptimizerState,
    contrastive_adv,
    i_fgsm,
    mi_fgsm,
    momentum_family_step,
    ni_fgsm,
    pi_fgsm,
    pi_fgsm_pp,
    run_attack,
    sini_fgsm,
    vmi_fgsm,
)
from vlmadv.replace import (
    BinaryMask,
    CenterBoxSegmentationBackend,
    PromptHashInpainter,
    ReplaceOutput,
)
from vlmadv.types import AttackConfig, ImageTensor, TargetSpec
from conftest import random_image


class LinearObjective:
    """J = sum(w * x); constant gradient."""

    def __init__(self, w):
        self.w = np.asarray(w, dtype=np.float64)

    def value_and_grad(self, x):
        return float(np.sum(self.w * x)), self.w.copy()

    def value(self, x):
        return float(np.sum(self.w * x))


class QuadraticObjective:
    """J = ||x - t||^2."""

    def __init__(self, t):
        self.t = np.asarray(t, dtype=np.float64)

    def value_and_grad(self, x):
        d = x - self.t
        return float(np.sum(d * d)), 2.0 * d

    def value(self, x):
        d = x - self.t
        return float(np.sum(d * d))


class FailingObjective:
    def __init__(self, fail_at):
        self.fail_at = fail_at
        self.calls = 0

    def value_and_grad(self, x):
        if self.calls >= self.fail_at:
            raise RuntimeError("backend went away")
        self.calls += 1
        return 1.0, np.ones_like(x)

    def value(self, x):
        return 1.0


class ZeroObjective:
    def value_and_grad(self, x):
        return 0.0, np.zeros_like(x)

    def value(self, x):
        return 0.0


def feature_setup(rng, be=None, hw=(16, 16)):
    be = be or AvgPoolBackend(image_hw=hw, grid_hw=(4, 4))
    x = random_image(rng, (*hw, 3))
    xt = random_image(rng, (*hw, 3))
    return be, x, xt, FeatureMatchObjective(be, be.encode(xt)[:, 1:])


def make_replace_output(be, xt):
    return ReplaceOutput(ImageTensor(xt),
                         patch_features(encode_image(be, ImageTensor(xt))),
                         BinaryMask(np.ones(xt.shape[:2], dtype=np.uint8)))


class TestIFgsm:
    def test_linear_single_step_closed_form(self, rng):
        w = rng.standard_normal((8, 8, 3))
        x = random_image(rng, (8, 8, 3), 0.3, 0.7)
        eps = 16 / 255
        cfg = AttackConfig(epsilon=eps, alpha=eps, steps=1)
        res = i_fgsm(x, LinearObjective(w), cfg)
        expected = np.clip(x - eps * np.sign(w), np.maximum(x - eps, 0), np.minimum(x + eps, 1))
        assert np.allclose(res.adversarial_image.data, expected, atol=1e-12)

    def test_paper_setting_runs_and_descends(self, rng):
        be, x, xt, obj = feature_setup(rng)
        cfg = AttackConfig(epsilon=16 / 255, alpha=1 / 255, steps=200)
        res = i_fgsm(x, obj, cfg)
        assert len(res.loss_trace) == 201
        assert res.loss_trace[-1] < res.loss_trace[0]
        assert res.perturbation.linf_norm <= cfg.epsilon

    def test_quadratic_matches_scalar_iteration_oracle(self, rng):
        t = random_image(rng, (4, 4, 3), 0.35, 0.65)
        x0 = random_image(rng, (4, 4, 3), 0.35, 0.65)
        cfg = AttackConfig(epsilon=0.5, alpha=0.01, steps=60)
        res = i_fgsm(x0, QuadraticObjective(t), cfg)

        x = x0.copy()  # per-coordinate signed-descent oracle
        for _ in range(cfg.steps):
            x = x - cfg.alpha * np.sign(x - t)
            x = np.clip(x, np.maximum(x0 - cfg.epsilon, 0), np.minimum(x0 + cfg.epsilon, 1))
        assert np.allclose(res.adversarial_image.data, x, atol=1e-12)
        assert np.max(np.abs(res.adversarial_image.data - t)) <= cfg.alpha + 1e-12


class TestReductionLattice:
    def test_exact_reductions_over_20_steps(self, rng):
        be, x, xt, obj = feature_setup(rng)
        cfg = AttackConfig(epsilon=16 / 255, alpha=1 / 255, steps=20, seed=3)

        r_ifgsm = i_fgsm(x, obj, cfg)
        r_mi0 = mi_fgsm(x, obj, dataclasses.replace(cfg, momentum_weight=0.0))
        r_ni0 = ni_fgsm(x, obj, dataclasses.replace(cfg, momentum_weight=0.0))
        r_mi = mi_fgsm(x, obj, cfg)
        r_vmi0 = vmi_fgsm(x, obj, dataclasses.replace(cfg, vmi_beta=0.0))
        r_ni = ni_fgsm(x, obj, cfg)
        r_sini1 = sini_fgsm(x, obj, dataclasses.replace(cfg, sini_scales=1))

        pairs = [
            ("VMI(beta=0) == MI", r_vmi0, r_mi),
            ("MI(mu=0) == I-FGSM", r_mi0, r_ifgsm),
            ("NI(mu=0) == MI(mu=0)", r_ni0, r_mi0),
            ("SINI(scales=1) == NI", r_sini1, r_ni),
        ]
        for label, a, b in pairs:
            assert np.max(np.abs(a.perturbation.delta - b.perturbation.delta)) <= 1e-12, label
            assert np.max(np.abs(np.asarray(a.loss_trace) - np.asarray(b.loss_trace))) <= 1e-12, label

    def test_contrastive_identity_reduces_to_ifgsm(self, rng):
        be, x, xt, obj = feature_setup(rng)
        cfg = AttackConfig(epsilon=16 / 255, alpha=1 / 255, steps=20,
                           triplet_weight=0.0)
        r_c = contrastive_adv(x, make_replace_output(be, xt), cfg, "sign",
                              vis_backend=be,
                              transform_config=TransformConfig.identity())
        r_i = i_fgsm(x, obj, cfg)
        assert np.max(np.abs(r_c.perturbation.delta - r_i.perturbation.delta)) <= 1e-12
        assert np.max(np.abs(np.asarray(r_c.loss_trace) - np.asarray(r_i.loss_trace))) <= 1e-12


class TestMomentumFamilyStep:
    def test_unknown_variant(self, rng):
        be, x, xt, obj = feature_setup(rng)
        state = OptimizerState.initial(x)
        with pytest.raises(Exception):
            momentum_family_step("adamw", state, x, obj, AttackConfig())

    def test_single_step_advances_state(self, rng):
        be, x, xt, obj = feature_setup(rng)
        cfg = AttackConfig(epsilon=16 / 255, alpha=1 / 255, steps=5)
        state = OptimizerState.initial(x)
        x1, state1 = momentum_family_step("mi", state, x, obj, cfg)
        assert state1.t == 1
        assert np.isfinite(state1.last_value)
        assert np.max(np.abs(x1 - x)) <= cfg.alpha + 1e-12


class TestVmi:
    def test_linear_objective_equals_mi_exactly(self, rng):
        # constant gradient: every neighborhood sample sees the same gradient
        w = rng.standard_normal((8, 8, 3))
        x = random_image(rng, (8, 8, 3), 0.3, 0.7)
        cfg = AttackConfig(epsilon=16 / 255, alpha=1 / 255, steps=10,
                           vmi_samples=4, seed=11)
        r_vmi = vmi_fgsm(x, LinearObjective(w), cfg)
        r_mi = mi_fgsm(x, LinearObjective(w), cfg)
        assert np.array_equal(r_vmi.perturbation.delta, r_mi.perturbation.delta)

    def test_quadratic_variance_within_monte_carlo_bound(self, rng):
        # J = 0.5 sum(a * (x - t)^2): grad(x + r) - grad(x) = a * r, so
        # v_t has mean 0 and per-coordinate std a * beta * eps / sqrt(3 N)
        shape = (6, 6, 3)
        a = 2.0
        t = random_image(rng, shape)
        x = random_image(rng, shape)
        beta, eps, n = 1.5, 16 / 255, 1000

        class Quad:
            def value_and_grad(self, xx):
                d = xx - t
                return float(0.5 * a * np.sum(d * d)), a * d

        g = np.random.default_rng(5)
        radius = beta * eps
        acc = np.zeros(shape)
        base_grad = Quad().value_and_grad(x)[1]
        for _ in range(n):
            r = g.uniform(-radius, radius, shape)
            acc += Quad().value_and_grad(x + r)[1]
        v = acc / n - base_grad
        sigma = a * radius / np.sqrt(3.0 * n)
        assert np.max(np.abs(v)) <= 3.0 * sigma * np.sqrt(2 * np.log(v.size))

    def test_beta_zero_reduces_to_mi(self, rng):
        be, x, xt, obj = feature_setup(rng)
        cfg = AttackConfig(epsilon=16 / 255, alpha=1 / 255, steps=8, vmi_beta=0.0)
        assert np.array_equal(vmi_fgsm(x, obj, cfg).perturbation.delta,
                              mi_fgsm(x, obj, cfg).perturbation.delta)


class TestContrastiveAdv:
    def test_paper_hyperparameters_accepted(self):
        cfg = AttackConfig(epsilon=16 / 255, alpha=1 / 255, steps=200,
                           triplet_weight=0.3)
        assert cfg.triplet_weight == pytest.approx(0.3)

    def test_loop_descends_with_default_transforms(self, rng):
        be, x, xt, obj = feature_setup(rng)
        cfg = AttackConfig(epsilon=16 / 255, alpha=1 / 255, steps=60, seed=4)
        res = contrastive_adv(x, make_replace_output(be, xt), cfg, "sign",
                              vis_backend=be, transform_config=TransformConfig())
        assert obj.value(res.adversarial_image.data) < obj.value(x)

    def test_vmi_step_rule_runs(self, rng):
        be, x, xt, obj = feature_setup(rng)
        cfg = AttackConfig(epsilon=16 / 255, alpha=1 / 255, steps=10,
                           vmi_samples=3, seed=4)
        res = contrastive_adv(x, make_replace_output(be, xt), cfg, "vmi",
                              vis_backend=be, transform_config=TransformConfig())
        assert len(res.loss_trace) == 11
        assert res.perturbation.linf_norm <= cfg.epsilon

    def test_unknown_step_rule(self, rng):
        be, x, xt, obj = feature_setup(rng)
        with pytest.raises(Exception):
            contrastive_adv(x, make_replace_output(be, xt), AttackConfig(steps=1),
                            "adam", vis_backend=be)


ALL_RUNNERS = {
    "ifgsm": i_fgsm,
    "mifgsm": mi_fgsm,
    "nifgsm": ni_fgsm,
    "sinifgsm": sini_fgsm,
    "pifgsm": pi_fgsm,
    "pifgsmpp": pi_fgsm_pp,
    "vmifgsm": vmi_fgsm,
}


class TestSharedInvariants:
    @pytest.mark.parametrize("name", sorted(ALL_RUNNERS))
    def test_feasibility_every_iterate(self, name, rng):
        be, x, xt, obj = feature_setup(rng)
        cfg = AttackConfig(epsilon=8 / 255, alpha=2 / 255, steps=12,
                           vmi_samples=2, sini_scales=2, seed=2)
        seen = []

        def on_step(t, x_t):
            seen.append(t)
            assert np.max(np.abs(x_t - x)) <= cfg.epsilon + 1e-9
            assert x_t.min() >= -1e-9 and x_t.max() <= 1 + 1e-9

        ALL_RUNNERS[name](x, obj, cfg, on_step=on_step)
        assert seen == list(range(cfg.steps))

    @pytest.mark.parametrize("name", ["ifgsm", "mifgsm", "nifgsm", "sinifgsm", "vmifgsm"])
    def test_monotone_budget_alpha_step_family(self, name, rng):
        be, x, xt, obj = feature_setup(rng)
        cfg = AttackConfig(epsilon=8 / 255, alpha=1 / 255, steps=15,
                           vmi_samples=2, sini_scales=2, seed=2)
        prev = [0.0]

        def on_step(t, x_t):
            norm = np.max(np.abs(x_t - x))
            assert norm <= min(prev[0] + cfg.alpha, cfg.epsilon) + 1e-12
            prev[0] = norm

        ALL_RUNNERS[name](x, obj, cfg, on_step=on_step)

    @pytest.mark.parametrize("name", ["pifgsm", "pifgsmpp"])
    def test_monotone_budget_amplified_family(self, name, rng):
        # patch-wise variants step by amplification*alpha plus the projected
        # overflow, bounded by twice the amplified step
        be, x, xt, obj = feature_setup(rng)
        cfg = AttackConfig(epsilon=8 / 255, alpha=1 / 255, steps=15, seed=2)
        step_bound = 2 * cfg.pi_amplification * cfg.alpha
        prev = [0.0]

        def on_step(t, x_t):
            norm = np.max(np.abs(x_t - x))
            assert norm <= min(prev[0] + step_bound, cfg.epsilon) + 1e-12
            prev[0] = norm

        ALL_RUNNERS[name](x, obj, cfg, on_step=on_step)

    def test_trace_length_and_result_contract(self, rng):
        be, x, xt, obj = feature_setup(rng)
        cfg = AttackConfig(epsilon=8 / 255, alpha=1 / 255, steps=7)
        res = i_fgsm(x, obj, cfg)
        assert len(res.loss_trace) == cfg.steps + 1
        assert np.array_equal(res.adversarial_image.data,
                              np.clip(x + res.perturbation.delta, 0, 1))
        assert res.config_echo == cfg

    def test_dead_gradient_aborts_after_five_steps(self, rng):
        x = random_image(rng, (4, 4, 3))
        cfg = AttackConfig(epsilon=8 / 255, alpha=1 / 255, steps=50)
        with pytest.raises(DeadGradientError) as err:
            i_fgsm(x, ZeroObjective(), cfg)
        assert err.value.step == 4
        with pytest.raises(DeadGradientError):
            mi_fgsm(x, ZeroObjective(), cfg)

    def test_mid_run_failure_carries_partial_trace(self, rng):
        x = random_image(rng, (4, 4, 3))
        cfg = AttackConfig(epsilon=8 / 255, alpha=1 / 255, steps=50)
        with pytest.raises(AttackRuntimeError) as err:
            i_fgsm(x, FailingObjective(fail_at=3), cfg)
        assert err.value.step == 3
        assert len(err.value.loss_trace) == 3


class TestRunAttack:
    def backends(self):
        be = AvgPoolBackend(image_hw=(16, 16), grid_hw=(4, 4))
        return dict(
            vis_backend=be,
            text_backend=HashTextBackend(latent_dim=3, seed=0),
            seg_backend=CenterBoxSegmentationBackend(box_frac=0.5),
            inpaint_backend=PromptHashInpainter(),
        )

    def test_latent_baseline_runs(self, rng):
        x = random_image(rng, (16, 16, 3))
        cfg = AttackConfig(epsilon=16 / 255, alpha=1 / 255, steps=25)
        res = run_attack(x, "a baseball", "ifgsm", "latent", cfg, **self.backends())
        assert res.loss_trace[-1] < res.loss_trace[0]

    def test_contrastive_with_latent_rejected(self, rng):
        x = random_image(rng, (16, 16, 3))
        with pytest.raises(IncompatibleMethodError, match="not applicable"):
            run_attack(x, "a baseball", "contrastive_adv", "latent",
                       AttackConfig(steps=1), **self.backends())

    def test_sign_family_with_contrastive_rejected(self, rng):
        x = random_image(rng, (16, 16, 3))
        with pytest.raises(IncompatibleMethodError):
            run_attack(x, TargetSpec("an apple", "a baseball"), "ifgsm",
                       "contrastive", AttackConfig(steps=1), **self.backends())

    def test_unknown_ids_rejected(self, rng):
        x = random_image(rng, (16, 16, 3))
        with pytest.raises(IncompatibleMethodError):
            run_attack(x, "k", "pgd", "latent", AttackConfig(steps=1), **self.backends())
        with pytest.raises(IncompatibleMethodError):
            run_attack(x, "k", "ifgsm", "classifier", AttackConfig(steps=1),
                       **self.backends())

    def test_full_pipeline_from_target_spec(self, rng):
        x = random_image(rng, (16, 16, 3))
        cfg = AttackConfig(epsilon=16 / 255, alpha=1 / 255, steps=30, seed=9)
        spec = TargetSpec("an apple", "a baseball")
        res = run_attack(x, spec, "contrastive_adv", "contrastive", cfg,
                         transform_config=TransformConfig.identity(),
                         **self.backends())
        assert res.loss_trace[-1] < res.loss_trace[0]

    def test_same_seed_bit_identical(self, rng):
        x = random_image(rng, (16, 16, 3))
        cfg = AttackConfig(epsilon=16 / 255, alpha=1 / 255, steps=12, seed=21)
        spec = TargetSpec("an apple", "a baseball")
        kw = dict(transform_config=TransformConfig(), **self.backends())
        a = run_attack(x, spec, "contrastive_adv", "contrastive", cfg, **kw)
        b = run_attack(x, spec, "contrastive_adv", "contrastive", cfg, **kw)
        assert np.array_equal(a.perturbation.delta, b.perturbation.delta)
        assert a.loss_trace == b.loss_trace

    def test_untargeted_flips_direction(self, rng):
        be = self.backends()
        x = random_image(rng, (16, 16, 3))
        cfg = AttackConfig(epsilon=16 / 255, alpha=1 / 255, steps=25)
        res = run_attack(x, "a baseball", "ifgsm", "latent", cfg,
                         untargeted=True, **be)
        # maximizing the latent distance: the (negated) trace decreases
        assert res.loss_trace[-1] < res.loss_trace[0]

    def test_method_registry_complete(self):
        assert set(METHOD_IDS) == {
            "ifgsm", "mifgsm", "nifgsm", "sinifgsm", "pifgsm", "pifgsmpp",
            "vmifgsm", "contrastive_adv", "contrastive_adv_vmi",
        }
