#!/usr/bin/env python3
"""Regenerate the committed golden fixture for the fixture-exact pipeline test.

Run from the repository root, then inspect `git diff tests/fixtures/golden`
before committing: any change means the pipeline's observable behavior moved.
"""

import shutil
import sys
import tempfile
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "tests"))

from golden_pipeline import FIXTURE_DIR, run_golden_pipeline  # noqa: E402


def main():
    FIXTURE_DIR.mkdir(parents=True, exist_ok=True)
    with tempfile.TemporaryDirectory() as tmp:
        run, report = run_golden_pipeline(Path(tmp))
        shutil.copy(run.root / "answers.jsonl", FIXTURE_DIR / "answers.jsonl")
        for label, path in report["tables"].items():
            shutil.copy(path, FIXTURE_DIR / f"scores_{label}.csv")
    print(f"fixture written to {FIXTURE_DIR}")


if __name__ == "__main__":
    main()
