#!/usr/bin/env python3
"""All four studies on the in-memory desk fixture (random backbones, no dataset).

    python scripts/desk_studies.py --out runs/desk --epochs 3

Useful as an end-to-end smoke run of training, evaluation and reporting; the
numbers say nothing about the paper's results.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

os.environ.setdefault("TF_ENABLE_ONEDNN_OPTS", "0")  # see cgvqa.cli

from cgvqa.model import ModelSpec
from cgvqa.studies import StudyData, StudySpec, emit_report, run_study
from cgvqa.synthetic import desk_study_data
from cgvqa.trainer import TrainConfig


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--out", type=Path, default=Path("runs/desk"))
    ap.add_argument("--epochs", type=int, default=3)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--studies", default="architecture,depth,sampling,crop")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(levelname)s %(message)s")

    data = StudyData(*desk_study_data(frames_per_variant=24, seed=args.seed))
    config = TrainConfig(epochs=args.epochs, batch_size=8, learning_rate=1e-4, head_learning_rate=3e-3,
                         seed=args.seed, eval_batch_size=8)
    model = ModelSpec("Xception", 6, pretrained=False, seed=args.seed)
    grids = {"sampling": (12, 4, 1)}  # the paper's strides exceed the fixture length
    failed = False
    for kind in args.studies.split(","):
        spec = StudySpec(kind, str(args.out / kind), grid=grids.get(kind, ()), base_config=config, model=model)
        result = run_study(spec, data)
        emit_report(result, args.out / kind)
        for c in result.cells:
            video = c.report("video")
            print(f"{kind:12s} {c.name:12s} {c.status:6s} video RMSE "
                  f"{'-' if video is None else f'{video.rmse:.2f}'}")
        failed |= result.failed
    return int(failed)


if __name__ == "__main__":
    sys.exit(main())
