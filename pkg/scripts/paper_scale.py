#!/usr/bin/env python3
"""Scan, label and run all four studies on a local GamingVideoSET copy.

    python scripts/paper_scale.py /data/GamingVideoSET --out runs

The corpus must follow ``<root>/<game>/<sequence>/<variant>.mp4`` with the
pristine reference stored as ``source.<ext>`` next to its encodes.  Afterwards
``CGVQA_DATASET=/data/GamingVideoSET CGVQA_RUNS=runs pytest -m paper_scale``
checks the optional acceptance criteria 11-13 against the written results.
"""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

from cgvqa.cli import main as cgvqa

HERE = Path(__file__).resolve().parent


def run(argv: list[str]) -> int:
    print("$ cgvqa " + " ".join(argv), flush=True)
    return cgvqa(argv)


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("root", type=Path)
    ap.add_argument("--out", type=Path, default=Path("runs"))
    ap.add_argument("--validation-games", required=True, help="the two validation-only games, comma-separated")
    ap.add_argument("--overlap-games", required=True, help="the two games split across both sets, comma-separated")
    ap.add_argument("--config", type=Path, default=HERE / "paper.toml")
    ap.add_argument("--studies", default="architecture,depth,sampling,crop")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    manifest = args.root / "manifest.json"
    cache = args.root / "labels"
    # command-line paths take precedence over the [data] table of the config
    common = ["--manifest", str(manifest), "--cache-root", str(cache), "--config", str(args.config),
              "--seed", str(args.seed)]

    if run(["scan", str(args.root), "--validation-games", args.validation_games,
            "--overlap-games", args.overlap_games, "--workers", "4", "--seed", str(args.seed)]):
        return 1
    if run(["label", *common, "--workers", "2"]):
        return 1
    failed = 0
    for kind in args.studies.split(","):
        failed |= run(["study", kind, *common, "--out", str(args.out / kind)])
    return failed


if __name__ == "__main__":
    sys.exit(main())
