#!/usr/bin/env python3
"""Run the full pipeline on the bundled synthetic corpus and print the report.

Also runs the nearest-neighbor-only ablation (top_j = 0) in a sibling state
directory so the two F1 scores can be compared side by side.

Usage:
  python scripts/run_synthetic.py [--state-dir runs/synthetic]
"""

import argparse
import json
import sys
from pathlib import Path

REPO_ROOT = Path(__file__).resolve().parent.parent
sys.path.insert(0, str(REPO_ROOT / "src"))

from logicl.cli import main as logicl_main  # noqa: E402

CONFIG = str(REPO_ROOT / "configs" / "synthetic.toml")


def run(state_dir: str, extra: list[str]) -> dict:
    rc = logicl_main(["all", "--config", CONFIG, "--state-dir", state_dir] + extra)
    if rc != 0:
        raise SystemExit(rc)
    return json.loads((Path(state_dir) / "report.json").read_text())


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--state-dir", default="runs/synthetic")
    args = parser.parse_args()

    dual = run(args.state_dir, [])
    knn = run(args.state_dir + "-knn-only", ["--top-i", "8", "--top-j", "0"])

    for name, report in (("dual-source", dual), ("knn-only", knn)):
        m = report["metrics"]
        print(
            f"{name:12s} P={m['precision']:.4f} R={m['recall']:.4f} F1={m['f1']:.4f} "
            f"(tp={m['tp']} fp={m['fp']} fn={m['fn']} tn={m['tn']} failed={m['failed']})"
        )


if __name__ == "__main__":
    main()
