"""Command-line entry points.

    vlmadv attack --config cfg.json [--output-root DIR]
    vlmadv evaluate --run RUN_DIR --metrics bleu,gleu,sim:hashed_bag
    vlmadv dataset validate MANIFEST
    vlmadv dataset stats MANIFEST
"""

from __future__ import annotations

import argparse
import json
import sys

from ..dataset import load_manifest, manifest_stats
from ..exceptions import ManifestValidationError, VlmAdvError
from .runner import cmd_attack, cmd_evaluate


def _build_parser():
    parser = argparse.ArgumentParser(prog="vlmadv")
    sub = parser.add_subparsers(dest="command", required=True)

    p_attack = sub.add_parser("attack", help="run the configured attack over a dataset")
    p_attack.add_argument("--config", required=True, help="path to a run config JSON")
    p_attack.add_argument("--output-root", default=None,
                          help="override the config's output directory")

    p_eval = sub.add_parser("evaluate", help="score a finished run")
    p_eval.add_argument("--run", required=True, help="run directory (holds manifest.json)")
    p_eval.add_argument("--metrics", required=True,
                        help="comma-separated: bleu, gleu, sim:<backend id>")

    p_data = sub.add_parser("dataset", help="manifest tooling")
    data_sub = p_data.add_subparsers(dest="dataset_command", required=True)
    for name in ("validate", "stats"):
        p = data_sub.add_parser(name)
        p.add_argument("manifest")
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        if args.command == "attack":
            manifest = cmd_attack(args.config, output_root=args.output_root)
            print(f"run {manifest.run_id} written to {manifest.root}")
            for image_id, record in sorted(manifest.images.items()):
                print(f"  {image_id}: {record['status']}")
            if manifest.children:
                print("  children: " + ", ".join(manifest.children))
        elif args.command == "evaluate":
            metrics = [m for m in args.metrics.split(",") if m]
            report = cmd_evaluate(args.run, metrics)
            print(json.dumps(report, indent=2))
        elif args.command == "dataset":
            if args.dataset_command == "validate":
                load_manifest(args.manifest)
                print("manifest is valid")
            else:
                stats = manifest_stats(load_manifest(args.manifest))
                print(json.dumps(stats, indent=2))
    except ManifestValidationError as exc:
        print(str(exc), file=sys.stderr)
        return 2
    except VlmAdvError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
