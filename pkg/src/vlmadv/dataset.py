"""Benchmark manifest schema, loader, validator, and statistics.

A manifest is a single JSON document:

    {"schema_version": 1,
     "entries": [{"image_id": ..., "image": <relative path>,
                  "target_object": ..., "target_prompt": ...,
                  "queries": [{"query_id": ..., "text": ...,
                               "polarity": "positive"|"negative"}, ...]}, ...]}

Positive queries keep their answer when the target object is replaced;
negative queries change answer. A 5-image synthetic sample ships with the
package for tests and demos.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

from .exceptions import ContractViolationError, ManifestValidationError

SCHEMA_VERSION = 1
POLARITIES = ("positive", "negative")


@dataclass(frozen=True)
class QueryRecord:
    query_id: str
    text: str
    polarity: str


@dataclass(frozen=True)
class ImageEntry:
    image_id: str
    image: str
    target_object: str
    target_prompt: str
    queries: tuple

    def resolve_image(self, manifest_dir) -> Path:
        return (Path(manifest_dir) / self.image).resolve()


@dataclass(frozen=True)
class DatasetManifest:
    entries: tuple
    schema_version: int = SCHEMA_VERSION
    source_dir: str = "."

    def iter_queries(self):
        for entry in self.entries:
            for q in entry.queries:
                yield entry, q


def _validate(doc, source_dir, check_files=True):
    problems = []
    if not isinstance(doc, dict):
        return ["manifest root must be a JSON object"], None
    if doc.get("schema_version") != SCHEMA_VERSION:
        problems.append(
            f"schema_version must be {SCHEMA_VERSION}, got {doc.get('schema_version')!r}"
        )
    raw_entries = doc.get("entries")
    if not isinstance(raw_entries, list):
        problems.append("entries must be a list")
        raw_entries = []

    entries = []
    seen_images, seen_queries = set(), set()
    for pos, raw in enumerate(raw_entries):
        label = f"entry[{pos}]"
        if not isinstance(raw, dict):
            problems.append(f"{label} must be an object")
            continue
        image_id = raw.get("image_id")
        if not image_id or not isinstance(image_id, str):
            problems.append(f"{label} missing image_id")
            image_id = f"<entry {pos}>"
        elif image_id in seen_images:
            problems.append(f"duplicate image_id {image_id!r}")
        seen_images.add(image_id)

        for key in ("target_object", "target_prompt"):
            if not raw.get(key) or not str(raw.get(key)).strip():
                problems.append(f"{image_id}: {key} must be non-empty")
        image_path = raw.get("image")
        if not image_path or not isinstance(image_path, str):
            problems.append(f"{image_id}: image path missing")
        elif check_files and not (Path(source_dir) / image_path).exists():
            problems.append(f"{image_id}: image file not found: {image_path}")

        raw_queries = raw.get("queries")
        queries = []
        if not isinstance(raw_queries, list) or not raw_queries:
            problems.append(f"{image_id}: needs at least one query")
            raw_queries = []
        for qraw in raw_queries:
            if not isinstance(qraw, dict):
                problems.append(f"{image_id}: query must be an object")
                continue
            qid = qraw.get("query_id")
            if not qid or not isinstance(qid, str):
                problems.append(f"{image_id}: query missing query_id")
                qid = f"<unnamed in {image_id}>"
            elif qid in seen_queries:
                problems.append(f"duplicate query_id {qid!r}")
            seen_queries.add(qid)
            if not qraw.get("text") or not str(qraw.get("text")).strip():
                problems.append(f"query {qid}: text must be non-empty")
            polarity = qraw.get("polarity")
            if polarity not in POLARITIES:
                problems.append(
                    f"query {qid}: polarity must be one of {POLARITIES}, got {polarity!r}"
                )
            queries.append(QueryRecord(query_id=str(qid), text=str(qraw.get("text")),
                                       polarity=str(polarity)))
        entries.append(ImageEntry(
            image_id=str(image_id), image=str(image_path),
            target_object=str(raw.get("target_object")),
            target_prompt=str(raw.get("target_prompt")),
            queries=tuple(queries),
        ))
    return problems, entries


def load_manifest(path, *, check_files: bool = True) -> DatasetManifest:
    """Parse and fully validate a manifest; every violation is reported."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ManifestValidationError([f"cannot parse {path}: {exc}"]) from exc
    problems, entries = _validate(doc, path.parent, check_files=check_files)
    if problems:
        raise ManifestValidationError(problems)
    return DatasetManifest(entries=tuple(entries), source_dir=str(path.parent))


def save_manifest(manifest: DatasetManifest, path) -> None:
    doc = {
        "schema_version": manifest.schema_version,
        "entries": [
            {
                "image_id": e.image_id,
                "image": e.image,
                "target_object": e.target_object,
                "target_prompt": e.target_prompt,
                "queries": [
                    {"query_id": q.query_id, "text": q.text, "polarity": q.polarity}
                    for q in e.queries
                ],
            }
            for e in manifest.entries
        ],
    }
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def manifest_stats(manifest: DatasetManifest) -> dict:
    """Exact image/query/polarity counts."""
    queries = [q for _, q in manifest.iter_queries()]
    positives = sum(1 for q in queries if q.polarity == "positive")
    return {
        "images": len(manifest.entries),
        "queries": len(queries),
        "positives": positives,
        "negatives": len(queries) - positives,
    }


def sample_manifest_path() -> Path:
    """Path of the bundled 5-image sample manifest."""
    return Path(resources.files("vlmadv").joinpath("data/sample/manifest.json"))
