"""Command line interface: ``cgvqa {scan,label,train,evaluate,study,report}``."""
from __future__ import annotations

import argparse
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path

# oneDNN keeps per-shape primitive caches that are never released; a study process
# building several backbones grows by hundreds of MB per cell with them on
os.environ.setdefault("TF_ENABLE_ONEDNN_OPTS", "0")

from cgvqa.manifest import MANIFEST_NAME, DatasetManifest, SubsampleSpec, build_split, plan_frames, scan_corpus
from cgvqa.trainer import TrainConfig, tomllib

log = logging.getLogger("cgvqa")


def _csv_set(value: str | None) -> set[str]:
    return {x.strip() for x in value.split(",") if x.strip()} if value else set()


def _load_toml(path: str | None) -> dict:
    if not path:
        return {}
    with open(path, "rb") as f:
        return tomllib.load(f)


def _paths(args, cfg: dict) -> tuple[Path, Path, Path]:
    data = cfg.get("data", {})
    manifest = Path(args.manifest or data.get("manifest") or MANIFEST_NAME)
    root = Path(data.get("corpus_root") or manifest.parent)
    cache = Path(args.cache_root or data.get("cache_root") or root / "labels")
    return manifest, root, cache


def _train_config(args, cfg: dict) -> TrainConfig:
    config = TrainConfig.from_dict(cfg.get("train", {}))
    if args.seed is not None:
        config = replace(config, seed=args.seed)
    if getattr(args, "epochs", None) is not None:
        config = replace(config, epochs=args.epochs)
    return config


def _model_spec(args, cfg: dict):
    from cgvqa.model import ModelSpec

    m = dict(cfg.get("model", {}))
    if getattr(args, "backbone", None):
        m["backbone"] = args.backbone
    if getattr(args, "modules", None) is not None:
        m["trainable_modules"] = args.modules
    if getattr(args, "no_pretrained", False):
        m["pretrained"] = False
    if args.seed is not None:
        m["seed"] = args.seed
    return ModelSpec(**m)


# -- subcommands ---------------------------------------------------------------


def cmd_scan(args, cfg) -> int:
    root = Path(args.root)
    manifest = scan_corpus(root, workers=args.workers, decode_at_display_resolution=not args.encoded_resolution)
    if args.validation_games or args.overlap_games:
        split = build_split(manifest, _csv_set(args.validation_games), _csv_set(args.overlap_games),
                            args.seed if args.seed is not None else 0)
        manifest = manifest.with_split(split)
    out = Path(args.manifest) if args.manifest else root / MANIFEST_NAME
    manifest.save(out)
    print(f"{len(manifest.games)} games, {len(manifest.sequences)} sequences, {len(manifest.variants)} variants, "
          f"{len(manifest.errors)} errors -> {out}")
    if manifest.split is not None:
        print(f"train: {len(manifest.split.train_sequences)} sequences / {manifest.train_frames} frames; "
              f"validation: {len(manifest.split.validation_sequences)} sequences / {manifest.validation_frames} frames")
    return 0


def cmd_label(args, cfg) -> int:
    from cgvqa.labeler import LabelCache, LabelError, ToolConfig, label_variant

    manifest_path, root, cache_root = _paths(args, cfg)
    manifest = DatasetManifest.load(manifest_path)
    cache = LabelCache(cache_root)
    tool = ToolConfig(**cfg.get("labeler", {}))

    def one(vid):
        try:
            label_variant(manifest, vid, cache, tool, root)
            return vid, None
        except LabelError as exc:
            return vid, str(exc)

    ids = [v.id for v in manifest.variants]
    with ThreadPoolExecutor(max(1, args.workers)) as pool:
        results = list(pool.map(one, ids))
    failed = [(v, e) for v, e in results if e]
    for v, e in failed:
        print(f"FAILED {v}: {e}", file=sys.stderr)
    print(f"labeled {len(ids) - len(failed)}/{len(ids)} variants into {cache_root}")
    return 1 if failed else 0


def _study_data(manifest_path: Path, root: Path, cache_root: Path):
    from cgvqa.labeler import LabelCache, load_labels
    from cgvqa.media import VideoFrameStore
    from cgvqa.studies import StudyData

    manifest = DatasetManifest.load(manifest_path)
    labels = load_labels(manifest, LabelCache(cache_root))
    return StudyData(manifest, labels, VideoFrameStore(manifest, root))


def cmd_train(args, cfg) -> int:
    from cgvqa.trainer import train

    manifest_path, root, cache_root = _paths(args, cfg)
    data = _study_data(manifest_path, root, cache_root)
    config = _train_config(args, cfg)
    spec = _model_spec(args, cfg)
    plan = plan_frames(data.manifest, "train", SubsampleSpec(args.stride, args.phase))
    val_plan = plan_frames(data.manifest, "validation")
    out = Path(args.out or "runs/train")
    result = train(spec, plan, data.labels, config, data.frames, validation_plan=val_plan, out_dir=out)
    print(f"trained {spec.backbone} k={spec.trainable_modules} on {len(plan)} frames; "
          f"best epoch {result.state.best_epoch}, val RMSE {result.state.best_validation_rmse:.3f}; "
          f"checkpoint {result.checkpoint}")
    return 0


def cmd_evaluate(args, cfg) -> int:
    from cgvqa import metrics
    from cgvqa.model import load_checkpoint
    from cgvqa.studies import _write_predictions
    from cgvqa.trainer import predict_plan

    manifest_path, root, cache_root = _paths(args, cfg)
    data = _study_data(manifest_path, root, cache_root)
    net, meta = load_checkpoint(args.checkpoint)
    plan = plan_frames(data.manifest, "validation")
    data.frames.preload_plan(plan)
    frames_pred = predict_plan(net, plan, data.labels, data.frames)
    video_pred = metrics.pool_to_video(frames_pred)
    reports = []
    for preds in (frames_pred, video_pred):
        reports.append(metrics.evaluate(preds))
        try:
            reports.extend(metrics.breakdown_by_seen(preds, data.manifest))
        except ValueError as exc:
            log.info("no seen/unseen breakdown: %s", exc)
    out = Path(args.out or Path(args.checkpoint).parent)
    out.mkdir(parents=True, exist_ok=True)
    metrics.write_reports_json(reports, out / "evaluation.json")
    metrics.write_table1_csv([(net.spec.backbone, r) for r in reports if r.group == "all"], out / "evaluation.csv")
    _write_predictions(frames_pred, out / "predictions.csv")
    for r in reports:
        print(f"{r.level:5s} {r.group:12s} n={r.n:6d} R2={r.r2} RMSE={r.rmse:.3f} PCC={r.pcc} SRCC={r.srcc}")
    return 0


def cmd_study(args, cfg) -> int:
    from cgvqa.studies import StudySpec, emit_report, run_study

    manifest_path, root, cache_root = _paths(args, cfg)
    study_cfg = cfg.get("study", {})
    grid = tuple(args.grid.split(",")) if args.grid else tuple(study_cfg.get("grid", ()))
    if args.kind in ("depth", "sampling"):
        grid = tuple(int(x) for x in grid)
    out = Path(args.out or f"runs/{args.kind}")
    spec = StudySpec(
        kind=args.kind,
        output_dir=str(out),
        grid=grid,
        base_config=_train_config(args, cfg),
        model=_model_spec(args, cfg),
        manifest_path=str(manifest_path),
        corpus_root=str(root),
        cache_root=str(cache_root),
        train_subsample=SubsampleSpec(study_cfg.get("train_stride", 1), study_cfg.get("train_phase", 0)),
    )
    result = run_study(spec)
    for path in emit_report(result, out):
        print(path)
    for c in result.cells:
        print(f"{c.name}: {c.status}" + (f" ({c.error})" if c.error else ""))
    return 1 if result.failed else 0


def cmd_report(args, cfg) -> int:
    from cgvqa.studies import emit_report, load_result

    out = Path(args.out or ".")
    result = load_result(out)
    for path in emit_report(result, out):
        print(path)
    return 1 if result.failed else 0


def _global_flags(suppress: bool) -> argparse.ArgumentParser:
    # subcommands repeat the global flags; SUPPRESS keeps them from resetting values given before the subcommand
    d = {"default": argparse.SUPPRESS} if suppress else {}
    g = argparse.ArgumentParser(add_help=False)
    g.add_argument("--manifest", help="manifest.json path", **d)
    g.add_argument("--cache-root", help="label cache directory", **d)
    g.add_argument("--seed", type=int, **d)
    g.add_argument("--config", help="TOML file with [train], [model], [study], [data], [labeler] tables", **d)
    g.add_argument("--out", help="output directory", **d)
    g.add_argument("-v", "--verbose", action="store_true", **d)
    return g


def build_parser() -> argparse.ArgumentParser:
    common = _global_flags(suppress=True)

    p = argparse.ArgumentParser(prog="cgvqa", description=__doc__, parents=[_global_flags(suppress=False)])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("scan", parents=[common], help="inventory a corpus into manifest.json")
    s.add_argument("root")
    s.add_argument("--validation-games", help="comma-separated games used only for validation")
    s.add_argument("--overlap-games", help="comma-separated games split across train and validation")
    s.add_argument("--workers", type=int, default=1)
    s.add_argument("--encoded-resolution", action="store_true",
                   help="crop from frames at encoded resolution instead of upscaling to the source size")
    s.set_defaults(func=cmd_scan)

    s = sub.add_parser("label", parents=[common], help="compute per-frame VMAF labels")
    s.add_argument("--workers", type=int, default=1)
    s.set_defaults(func=cmd_label)

    def model_flags(s):
        s.add_argument("--backbone", choices=["DenseNet121", "ResNet50", "Xception"])
        s.add_argument("--modules", type=int, help="number of trainable trailing backbone modules")
        s.add_argument("--no-pretrained", action="store_true", help="random backbone (offline smoke runs)")
        s.add_argument("--epochs", type=int)

    s = sub.add_parser("train", parents=[common], help="fine-tune one model")
    model_flags(s)
    s.add_argument("--stride", type=int, default=1, help="use every n-th frame")
    s.add_argument("--phase", type=int, default=0)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("evaluate", parents=[common], help="evaluate a checkpoint on the validation split")
    s.add_argument("--checkpoint", required=True)
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("study", parents=[common], help="run one of the four studies")
    s.add_argument("kind", choices=["architecture", "depth", "sampling", "crop"])
    s.add_argument("--grid", help="comma-separated grid override")
    model_flags(s)
    s.set_defaults(func=cmd_study)

    s = sub.add_parser("report", parents=[common], help="re-emit tables and plots from results.json in --out")
    s.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    cfg = _load_toml(args.config)
    return args.func(args, cfg)


if __name__ == "__main__":
    sys.exit(main())
