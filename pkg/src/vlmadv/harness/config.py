"""Run configuration: a single JSON file describing dataset, backends,
method/objective, attack hyperparameters, transforms, and providers.

Budget fields accept either numbers or "n/255"-style fraction strings.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from ..augmentation import TransformConfig
from ..exceptions import ContractViolationError
from ..optimizers import METHOD_IDS, OBJECTIVE_IDS
from ..registry import (
    ANSWER_PROVIDERS,
    INPAINTING_BACKENDS,
    SEGMENTATION_BACKENDS,
    TEXT_BACKENDS,
    VISUAL_BACKENDS,
)
from ..types import AttackConfig


def parse_budget(value) -> float:
    """Accept 0.0627-style numbers or '16/255' fraction strings."""
    if isinstance(value, (int, float)):
        return float(value)
    if isinstance(value, str) and "/" in value:
        num, den = value.split("/", 1)
        return float(num) / float(den)
    raise ContractViolationError(f"cannot parse budget value {value!r}")


_ATTACK_FRACTIONS = ("epsilon", "alpha")


def build_attack_config(raw: dict) -> AttackConfig:
    kwargs = dict(raw)
    for key in _ATTACK_FRACTIONS:
        if key in kwargs:
            kwargs[key] = parse_budget(kwargs[key])
    return AttackConfig(**kwargs)


@dataclass
class RunConfig:
    """Validated run configuration plus the verbatim JSON snapshot."""

    dataset: Path
    output_dir: Path
    method: str
    objective: str
    attack: AttackConfig
    backends: dict
    transforms: TransformConfig
    providers: list
    epsilon_sweep: list | None
    seg_threshold: float
    seg_margin: int
    replace_cache: Path | None
    workers: int
    norm: str
    run_id: str | None
    snapshot: dict

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        path = Path(path)
        try:
            doc = json.loads(path.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ContractViolationError(f"cannot parse config {path}: {exc}") from exc
        return cls.from_dict(doc, base_dir=path.parent)

    @classmethod
    def from_dict(cls, doc: dict, base_dir=".") -> "RunConfig":
        base_dir = Path(base_dir)

        def resolve(p):
            p = Path(p)
            return p if p.is_absolute() else base_dir / p

        for required in ("dataset", "method", "objective", "backends"):
            if required not in doc:
                raise ContractViolationError(f"config is missing {required!r}")
        method, objective = doc["method"], doc["objective"]
        if method not in METHOD_IDS:
            raise ContractViolationError(f"unknown method {method!r}")
        if objective not in OBJECTIVE_IDS:
            raise ContractViolationError(f"unknown objective {objective!r}")

        backends = doc["backends"]
        registry_of = {
            "visual": VISUAL_BACKENDS,
            "text": TEXT_BACKENDS,
            "segmentation": SEGMENTATION_BACKENDS,
            "inpainting": INPAINTING_BACKENDS,
        }
        for kind, block in backends.items():
            if kind not in registry_of:
                raise ContractViolationError(f"unknown backend kind {kind!r}")
            if "id" not in block:
                raise ContractViolationError(f"backend block {kind!r} needs an id")
            if block["id"] not in registry_of[kind]:
                raise ContractViolationError(
                    f"unknown {kind} backend id {block['id']!r}"
                )
        if "visual" not in backends:
            raise ContractViolationError("config needs a visual backend")

        providers = doc.get("providers", [])
        for p in providers:
            if "id" not in p or p["id"] not in ANSWER_PROVIDERS:
                raise ContractViolationError(f"unknown provider {p.get('id')!r}")

        sweep = doc.get("epsilon_sweep")
        if sweep is not None:
            sweep = [parse_budget(v) for v in sweep]
            if not sweep:
                raise ContractViolationError("epsilon_sweep must be non-empty")

        tdoc = dict(doc.get("transforms", {}))
        if "rotation_choices" in tdoc and tdoc["rotation_choices"] is not None:
            tdoc["rotation_choices"] = tuple(tdoc["rotation_choices"])
        if "resize_range" in tdoc and tdoc["resize_range"] is not None:
            tdoc["resize_range"] = tuple(tdoc["resize_range"])

        return cls(
            dataset=resolve(doc["dataset"]),
            output_dir=resolve(doc.get("output_dir", "runs")),
            method=method,
            objective=objective,
            attack=build_attack_config(doc.get("attack", {})),
            backends=backends,
            transforms=TransformConfig(**tdoc),
            providers=providers,
            metrics=list(doc.get("metrics", [])),
            epsilon_sweep=sweep,
            seg_threshold=float(doc.get("seg_threshold", 0.5)),
            seg_margin=int(doc.get("seg_margin", 0)),
            replace_cache=resolve(doc["replace_cache"]) if doc.get("replace_cache") else None,
            workers=int(doc.get("workers", 1)),
            norm=str(doc.get("norm", "fro")),
            run_id=doc.get("run_id"),
            snapshot=doc,
        )

    def build_backends(self) -> dict:
        registry_of = {
            "visual": VISUAL_BACKENDS,
            "text": TEXT_BACKENDS,
            "segmentation": SEGMENTATION_BACKENDS,
            "inpainting": INPAINTING_BACKENDS,
        }
        built = {}
        for kind, block in self.backends.items():
            params = {k: v for k, v in block.items() if k != "id"}
            for key in ("image_hw", "grid_hw"):
                if key in params:
                    params[key] = tuple(params[key])
            built[kind] = registry_of[kind].create(block["id"], **params)
        return built

    def build_providers(self) -> list:
        out = []
        for block in self.providers:
            params = {k: v for k, v in block.items() if k != "id"}
            out.append(ANSWER_PROVIDERS.create(block["id"], **params))
        return out
