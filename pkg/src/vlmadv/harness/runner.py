"""Run orchestration: attack over a dataset, answer fetching with caching,
and table/plot emission.

Run directory layout:

    runs/<run_id>/
        manifest.json       run id, config snapshot, per-image artifacts
        images/             <image_id>.adv.png (quantized), <image_id>.target.png
        sidecars/           <image_id>.f32 raw float sidecar of the attack output
        answers.jsonl       append-only answer cache
        scores/             per-query score records (line-delimited JSON)
        tables/             CSV + formatted text tables
        plots/              score-vs-epsilon line plots (sweep runs)
"""

from __future__ import annotations

import dataclasses
import json
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from .. import storage
from ..dataset import load_manifest
from ..evaluation import AnswerSet, aggregate_table, score_answer_set
from ..exceptions import ContractViolationError, VlmAdvError
from ..optimizers import run_attack
from ..registry import ANSWER_PROVIDERS
from ..replace import ReplaceCache, replace as run_replace
from ..types import TargetSpec, quantize_8bit
from .config import RunConfig
from .providers import AnswerCache, ask_with_retries


class RunManifest:
    """Persisted description of one attack run (or a sweep parent)."""

    def __init__(self, run_id, root, config, dataset_path, images=None,
                 children=None, created_at=None):
        self.run_id = run_id
        self.root = Path(root)
        self.config = config
        self.dataset_path = str(dataset_path)
        self.images = dict(images or {})
        self.children = list(children or [])
        self.created_at = created_at or time.strftime(
            "%Y-%m-%dT%H:%M:%SZ", time.gmtime()
        )

    def save(self):
        doc = {
            "run_id": self.run_id,
            "config": self.config,
            "dataset_path": self.dataset_path,
            "images": self.images,
            "children": self.children,
            "created_at": self.created_at,
        }
        self.root.mkdir(parents=True, exist_ok=True)
        (self.root / "manifest.json").write_text(json.dumps(doc, indent=2, sort_keys=True))
        return self

    @classmethod
    def load(cls, root):
        root = Path(root)
        doc = json.loads((root / "manifest.json").read_text())
        return cls(run_id=doc["run_id"], root=root, config=doc["config"],
                   dataset_path=doc["dataset_path"], images=doc["images"],
                   children=doc["children"], created_at=doc["created_at"])


def _image_seed(base_seed: int, index: int) -> int:
    return int(np.random.SeedSequence(entropy=base_seed,
                                      spawn_key=(index,)).generate_state(1)[0])


def _attack_one(cfg: RunConfig, backends, entry, index, manifest_dir, run_dir,
                cache):
    x = storage.load_png(entry.resolve_image(manifest_dir))
    vis = backends["visual"]
    if x.shape != (*vis.input_hw, vis.channels):
        raise ContractViolationError(
            f"image {entry.image_id} has shape {x.shape}, backend needs "
            f"{(*vis.input_hw, vis.channels)}"
        )
    spec = TargetSpec(entry.target_object, entry.target_prompt)
    record = {}

    target = None
    if "segmentation" in backends and "inpainting" in backends:
        target = run_replace(
            x, spec, seg_backend=backends["segmentation"],
            inpaint_backend=backends["inpainting"], vis_backend=vis,
            threshold=cfg.seg_threshold, margin=cfg.seg_margin, cache=cache,
        )
        target_path = run_dir / "images" / f"{entry.image_id}.target.png"
        storage.save_png(target.target_image, target_path)
        record["target_png"] = str(target_path.relative_to(run_dir))
    elif cfg.objective != "latent":
        raise ContractViolationError(
            f"objective {cfg.objective!r} needs segmentation and inpainting backends"
        )

    attack_cfg = dataclasses.replace(cfg.attack,
                                     seed=_image_seed(cfg.attack.seed, index))
    result = run_attack(
        x, target if target is not None else spec, cfg.method, cfg.objective,
        attack_cfg, vis_backend=vis, text_backend=backends.get("text"),
        transform_config=cfg.transforms, norm=cfg.norm,
    )

    adv_path = run_dir / "images" / f"{entry.image_id}.adv.png"
    sidecar_path = run_dir / "sidecars" / f"{entry.image_id}.f32"
    storage.save_png(quantize_8bit(result.adversarial_image), adv_path)
    storage.save_image_sidecar(result.adversarial_image, sidecar_path)
    record.update({
        "status": "ok",
        "adv_png": str(adv_path.relative_to(run_dir)),
        "sidecar": str(sidecar_path.relative_to(run_dir)),
        "initial_loss": result.loss_trace[0],
        "final_loss": result.loss_trace[-1],
        "seed": attack_cfg.seed,
    })
    return record


def _run_single(cfg: RunConfig, run_id: str) -> RunManifest:
    run_dir = cfg.output_dir / run_id
    if run_dir.exists():
        raise ContractViolationError(f"run directory already exists: {run_dir}")
    backends = cfg.build_backends()  # fail fast before touching any image
    dataset = load_manifest(cfg.dataset)
    for sub in ("images", "sidecars", "scores", "tables", "plots"):
        (run_dir / sub).mkdir(parents=True, exist_ok=True)
    cache = ReplaceCache(cfg.replace_cache) if cfg.replace_cache else None

    manifest_dir = Path(cfg.dataset).parent
    records = {}

    def work(item):
        index, entry = item
        try:
            return entry.image_id, _attack_one(
                cfg, backends, entry, index, manifest_dir, run_dir, cache
            )
        except Exception as exc:  # per-image isolation: record and continue
            return entry.image_id, {"status": "failed", "error": f"{type(exc).__name__}: {exc}"}

    items = list(enumerate(dataset.entries))
    parallel_ok = cfg.workers > 1 and all(
        getattr(b, "thread_safe", False) for b in backends.values()
        if hasattr(b, "thread_safe")
    )
    if parallel_ok:
        with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
            for image_id, record in pool.map(work, items):
                records[image_id] = record
    else:
        for item in items:
            image_id, record = work(item)
            records[image_id] = record

    return RunManifest(run_id=run_id, root=run_dir, config=cfg.snapshot,
                       dataset_path=cfg.dataset, images=records).save()


def _default_run_id(cfg: RunConfig) -> str:
    import hashlib

    digest = hashlib.sha256(
        json.dumps(cfg.snapshot, sort_keys=True).encode()
    ).hexdigest()[:12]
    return f"run-{digest}"


def cmd_attack(config, output_root=None) -> RunManifest:
    """Run the configured attack over the dataset.

    With an ``epsilon_sweep`` in the config, one child run per epsilon is
    produced and the returned manifest is their parent.
    """
    cfg = config if isinstance(config, RunConfig) else RunConfig.from_file(config)
    if output_root is not None:
        cfg.output_dir = Path(output_root)
    run_id = cfg.run_id or _default_run_id(cfg)

    if not cfg.epsilon_sweep:
        return _run_single(cfg, run_id)

    children = []
    for eps in cfg.epsilon_sweep:
        label = f"eps-{eps:.6f}"
        child_snapshot = dict(cfg.snapshot)
        child_snapshot.pop("epsilon_sweep", None)
        child_snapshot["attack"] = dict(child_snapshot.get("attack", {}),
                                        epsilon=eps)
        child = dataclasses.replace(
            cfg, attack=dataclasses.replace(cfg.attack, epsilon=eps),
            epsilon_sweep=None, run_id=f"{run_id}-{label}",
            snapshot=child_snapshot,
        )
        children.append(_run_single(child, child.run_id).run_id)

    parent = RunManifest(run_id=run_id, root=cfg.output_dir / run_id,
                         config=cfg.snapshot, dataset_path=cfg.dataset,
                         children=children)
    (parent.root / "plots").mkdir(parents=True, exist_ok=True)
    (parent.root / "tables").mkdir(parents=True, exist_ok=True)
    return parent.save()


def fetch_answers(run: RunManifest, providers, queries=None, retries=2):
    """Answers for (x, x_target, x') on every query, served from the run's
    append-only cache when present.

    Returns (answer_sets, missing) where ``missing`` lists
    (query_id, provider, variant) cells that no retry could fill; those are
    never fabricated.
    """
    dataset = load_manifest(run.dataset_path)
    manifest_dir = Path(run.dataset_path).parent
    cache = AnswerCache(run.root / "answers.jsonl")
    wanted = set(queries) if queries is not None else None

    answer_sets = []
    missing = []
    for entry in dataset.entries:
        record = run.images.get(entry.image_id)
        if record is None or record.get("status") != "ok":
            continue
        variants = {"orig": storage.load_png(entry.resolve_image(manifest_dir)),
                    "adv": storage.load_png(run.root / record["adv_png"])}
        if "target_png" in record:
            variants["target"] = storage.load_png(run.root / record["target_png"])
        hashes = {k: storage.content_hash(v) for k, v in variants.items()}

        for query in entry.queries:
            if wanted is not None and query.query_id not in wanted:
                continue
            for provider in providers:
                got = {}
                for variant in ("orig", "target", "adv"):
                    if variant not in variants:
                        got[variant] = None
                        continue
                    answer = cache.get(provider.name, hashes[variant], query.query_id)
                    if answer is None:
                        answer = ask_with_retries(provider, variants[variant],
                                                  query.text, retries=retries)
                        if answer is not None:
                            cache.put(provider.name, hashes[variant],
                                      query.query_id, answer,
                                      decoding=getattr(provider, "decoding",
                                                       "deterministic"))
                    got[variant] = answer
                if None in got.values():
                    for variant, answer in got.items():
                        if answer is None:
                            missing.append((query.query_id, provider.name, variant))
                    continue
                answer_sets.append(AnswerSet(
                    ans=got["orig"], ans_target=got["target"], ans_adv=got["adv"],
                    provider=provider.name, query_id=query.query_id,
                ))
    return answer_sets, missing


def _metric_filename(metric: str) -> str:
    return metric.replace(":", "_")


def _score_records(run, answer_sets, metrics):
    sim_backends = {}
    records, raw_records = [], []
    for answers in answer_sets:
        for metric in metrics:
            raw, success = score_answer_set(answers, metric, sim_backends)
            base = {"query_id": answers.query_id, "provider": answers.provider,
                    "run_id": run.run_id}
            records.append(dict(base, metric=metric, value=success))
            raw_records.append(dict(base, metric=f"{metric}:raw", value=raw))
    return records, raw_records


def _polarity_of_queries(dataset_path):
    dataset = load_manifest(dataset_path)
    return {q.query_id: q.polarity for _, q in dataset.iter_queries()}


def _write_tables(run_dir, records, polarity, column_key="run_id"):
    """CSV + text tables for all queries and per polarity; returns paths and
    the exhaustive missing-cell list."""
    from ..exceptions import MissingCellsError

    outputs = {}
    missing_all = []
    subsets = {
        "all": records,
        "positive": [r for r in records if polarity.get(r["query_id"]) == "positive"],
        "negative": [r for r in records if polarity.get(r["query_id"]) == "negative"],
    }
    for label, subset in subsets.items():
        if not subset:
            continue
        table = aggregate_table(subset, column_key=column_key, strict=False)
        csv_path = run_dir / "tables" / f"scores_{label}.csv"
        csv_path.write_text(table.to_csv())
        (run_dir / "tables" / f"scores_{label}.txt").write_text(table.to_text())
        outputs[label] = csv_path
        try:
            aggregate_table(subset, column_key=column_key, strict=True)
        except MissingCellsError as exc:
            missing_all.extend(exc.missing)
    return outputs, missing_all


def cmd_evaluate(run, metrics, providers=None, retries=2) -> dict:
    """Score a run (or a sweep parent) and emit tables and plots.

    ``metrics`` entries are "bleu", "gleu", or "sim:<backend id>"; an empty
    set is a usage error. Sweep parents additionally get one score-vs-epsilon
    plot per metric.
    """
    if isinstance(run, (str, Path)):
        run = RunManifest.load(run)
    metrics = list(metrics)
    if not metrics:
        raise ContractViolationError("no metrics given; e.g. bleu,gleu,sim:hashed_bag")

    if run.children:
        return _evaluate_sweep(run, metrics, providers=providers, retries=retries)

    if providers is None:
        providers = [  # rebuild from the config snapshot
            ANSWER_PROVIDERS.create(b["id"], **{k: v for k, v in b.items() if k != "id"})
            for b in run.config.get("providers", [])
        ]
    if not providers:
        raise ContractViolationError("no answer providers configured")

    answer_sets, missing_answers = fetch_answers(run, providers, retries=retries)
    records, raw_records = _score_records(run, answer_sets, metrics)
    scores_path = run.root / "scores" / "records.jsonl"
    with scores_path.open("w") as fh:
        for rec in records + raw_records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")

    polarity = _polarity_of_queries(run.dataset_path)
    tables, missing_cells = _write_tables(run.root, records, polarity)
    report = {
        "run_id": run.run_id,
        "tables": {k: str(v) for k, v in tables.items()},
        "records": str(scores_path),
        "missing_answers": missing_answers,
        "missing_cells": [list(map(str, cell)) for cell in missing_cells],
    }
    if missing_answers or missing_cells:
        (run.root / "tables" / "missing_cells.json").write_text(
            json.dumps(report["missing_cells"] + [list(m) for m in missing_answers],
                       indent=2)
        )
        print(f"warning: {len(missing_answers)} missing answers, "
              f"{len(missing_cells)} incomplete cells", file=sys.stderr)
    return report


def _evaluate_sweep(run, metrics, providers=None, retries=2) -> dict:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    child_records = []
    epsilons = {}
    for child_id in run.children:
        child = RunManifest.load(run.root.parent / child_id)
        cmd_evaluate(child, metrics, providers=providers, retries=retries)
        eps = float(child.config["attack"]["epsilon"])
        label = f"{eps:.6f}"
        epsilons[label] = eps
        for line in (child.root / "scores" / "records.jsonl").read_text().splitlines():
            rec = json.loads(line)
            if rec["metric"].endswith(":raw"):
                continue
            rec["epsilon"] = label
            child_records.append(rec)

    polarity = _polarity_of_queries(run.dataset_path)
    tables, missing_cells = _write_tables(run.root, child_records, polarity,
                                          column_key="epsilon")

    table_all = aggregate_table(child_records, column_key="epsilon", strict=False)
    plot_paths = {}
    for metric in metrics:
        xs, ys = [], []
        for label in sorted(epsilons):
            for provider, row_metric, values in table_all.rows:
                if provider == "avg" and row_metric == metric and values.get(label) is not None:
                    xs.append(epsilons[label])
                    ys.append(values[label])
        fig, ax = plt.subplots(figsize=(5, 3.5))
        ax.plot(xs, ys, marker="o")
        ax.set_xlabel("epsilon")
        ax.set_ylabel(f"{metric} success rate (avg)")
        ax.set_title(run.run_id)
        fig.tight_layout()
        path = run.root / "plots" / f"{_metric_filename(metric)}.png"
        fig.savefig(path)
        plt.close(fig)
        plot_paths[metric] = str(path)

    return {
        "run_id": run.run_id,
        "tables": {k: str(v) for k, v in tables.items()},
        "plots": plot_paths,
        "missing_cells": [list(map(str, cell)) for cell in missing_cells],
    }
