"""Targeted adversarial perturbations against late-fusion vision-language
encoders: target synthesis by segmentation + inpainting, an l-inf-bounded
signed-gradient attack family, and a VQA-style evaluation harness."""

from .augmentation import (
    TransformConfig,
    TransformPair,
    apply_feature_transform,
    apply_image_transform,
    sample_transform,
)
from .objectives import (
    ContrastiveObjective,
    FeatureMatchObjective,
    LatentObjective,
    ObjectiveContext,
)
from .optimizers import (
    METHOD_IDS,
    OBJECTIVE_IDS,
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
from .replace import BinaryMask, ReplaceCache, ReplaceOutput, apply_mask, inpaint, replace, segment_target
from .types import (
    AttackConfig,
    AttackResult,
    ImageTensor,
    Perturbation,
    TargetSpec,
    compose,
    project_linf,
    quantize_8bit,
)

__version__ = "0.1.0"
