"""The four experiments: architectures, freeze depth, frame subsampling, crop policy."""
from __future__ import annotations

import csv
import json
import logging
import math
import os
import traceback
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Literal, Mapping, Sequence

import numpy as np

from cgvqa import metrics
from cgvqa.labeler import LabelCache, load_labels
from cgvqa.manifest import DatasetManifest, SubsampleSpec, plan_frames
from cgvqa.media import CENTER, CropPolicy, VideoFrameStore
from cgvqa.model import ModelSpec, module_boundaries
from cgvqa.trainer import FrameSource, TrainConfig, predict_plan, train

log = logging.getLogger(__name__)

StudyKind = Literal["architecture", "depth", "sampling", "crop"]

DEFAULT_GRIDS: dict[str, tuple] = {
    "architecture": ("DenseNet121", "ResNet50", "Xception"),
    "depth": (1, 4, 6),
    "sampling": (403, 203, 103, 53, 23),
    "crop": ("random", "center"),
}
XCEPTION_MODULES = 14


@dataclass(frozen=True)
class StudySpec:
    kind: StudyKind
    output_dir: str
    grid: tuple = ()
    base_config: TrainConfig = field(default_factory=TrainConfig)
    model: ModelSpec = field(default_factory=ModelSpec)
    manifest_path: str | None = None
    corpus_root: str | None = None
    cache_root: str | None = None
    train_subsample: SubsampleSpec = SubsampleSpec()
    validation_subsample: SubsampleSpec = SubsampleSpec()

    def __post_init__(self):
        if self.kind not in DEFAULT_GRIDS:
            raise ValueError(f"unknown study kind {self.kind!r}")
        if not self.grid:
            object.__setattr__(self, "grid", DEFAULT_GRIDS[self.kind])

    def provenance(self) -> dict:
        return {
            "kind": self.kind,
            "grid": list(self.grid),
            "train_config": self.base_config.to_dict(),
            "model": asdict(self.model),
            "manifest_path": self.manifest_path,
            "cache_root": self.cache_root,
            "train_subsample": asdict(self.train_subsample),
            "validation_subsample": asdict(self.validation_subsample),
        }


@dataclass
class StudyData:
    manifest: DatasetManifest
    labels: Mapping[tuple[str, int], float]
    frames: FrameSource
    label_provenance: dict = field(default_factory=dict)


def load_study_data(spec: StudySpec) -> StudyData:
    if not spec.manifest_path:
        raise ValueError("study needs a manifest path")
    manifest = DatasetManifest.load(spec.manifest_path)
    root = spec.corpus_root or str(Path(spec.manifest_path).parent)
    cache = LabelCache(spec.cache_root or Path(root) / "labels")
    labels = load_labels(manifest, cache)
    meta = {}
    for v in manifest.variants:
        m = cache.meta(v.id)
        if m is not None:
            meta = {"tool_version": m.tool_version, "model_id": m.model_id, "upscale_filter": m.upscale_filter}
            break
    return StudyData(manifest, labels, VideoFrameStore(manifest, root), meta)


@dataclass
class CellResult:
    name: str
    params: dict
    status: str = "ok"
    reports: dict[str, metrics.EvalReport] = field(default_factory=dict)  # "<level>/<group>"
    history: list[dict] = field(default_factory=list)
    checkpoint: str | None = None
    total_frames: int = 0
    error: str | None = None
    predictions: metrics.PredictionSet | None = None

    def report(self, level: str, group: str = "all") -> metrics.EvalReport | None:
        return self.reports.get(f"{level}/{group}")

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "params": self.params,
            "status": self.status,
            "reports": {k: r.to_dict() for k, r in self.reports.items()},
            "history": self.history,
            "checkpoint": self.checkpoint,
            "total_frames": self.total_frames,
            "error": self.error,
        }


@dataclass
class StudyResult:
    spec: StudySpec
    cells: list[CellResult]
    label_provenance: dict = field(default_factory=dict)
    summary: dict = field(default_factory=dict)

    @property
    def failed(self) -> bool:
        return any(c.status != "ok" for c in self.cells)


def _architecture_modules(backbone: str, xception_k: int) -> int:
    """Scale the Xception freeze depth to another backbone by module fraction."""
    total = len(module_boundaries(backbone))
    if backbone == "Xception":
        return xception_k
    return min(total, max(0, round(xception_k * total / XCEPTION_MODULES)))


def _evaluate_cell(cell: CellResult, frames_pred: metrics.PredictionSet, manifest: DatasetManifest) -> None:
    video_pred = metrics.pool_to_video(frames_pred)
    for level, preds in (("frame", frames_pred), ("video", video_pred)):
        cell.reports[f"{level}/all"] = metrics.evaluate(preds, "all")
        try:
            seen, unseen = metrics.breakdown_by_seen(preds, manifest)
        except ValueError as exc:
            log.info("no seen/unseen breakdown for %s: %s", cell.name, exc)
            continue
        cell.reports[f"{level}/seen_games"] = seen
        cell.reports[f"{level}/unseen_games"] = unseen


def run_cell(
    name: str,
    params: dict,
    model_spec: ModelSpec,
    config: TrainConfig,
    train_sub: SubsampleSpec,
    spec: StudySpec,
    data: StudyData,
) -> CellResult:
    cell = CellResult(name, {**params, "seed": config.seed, "backbone": model_spec.backbone,
                             "k": model_spec.trainable_modules, "n": train_sub.n, "phase": train_sub.phase,
                             "crop_policy": config.crop_policy.kind})
    cell_dir = Path(spec.output_dir) / "cells" / name
    try:
        plan = plan_frames(data.manifest, "train", train_sub)
        val_plan = plan_frames(data.manifest, "validation", spec.validation_subsample)
        cell.total_frames = len(plan)
        result = train(model_spec, plan, data.labels, config, data.frames, validation_plan=val_plan, out_dir=cell_dir)
        cell.history = [asdict(r) for r in result.state.history]
        cell.checkpoint = str(result.checkpoint) if result.checkpoint else None
        preds = predict_plan(result.net, val_plan, data.labels, data.frames, CENTER, config.eval_batch_size)
        cell.predictions = preds
        _evaluate_cell(cell, preds, data.manifest)
        _write_predictions(preds, cell_dir / "predictions.csv")
    except Exception as exc:  # a failing cell must not take the study down
        log.error("cell %s failed: %s", name, exc)
        cell.status = "failed"
        cell.error = "".join(traceback.format_exception_only(type(exc), exc)).strip()
    return cell


def _data(spec: StudySpec, data: StudyData | None) -> StudyData:
    return data if data is not None else load_study_data(spec)


def run_architecture_study(spec: StudySpec, data: StudyData | None = None) -> StudyResult:
    data = _data(spec, data)
    cells = []
    for backbone in spec.grid:
        k = _architecture_modules(backbone, spec.model.trainable_modules)
        model_spec = replace(spec.model, backbone=backbone, trainable_modules=k)
        cells.append(run_cell(backbone, {"architecture": backbone}, model_spec, spec.base_config,
                              spec.train_subsample, spec, data))
    return StudyResult(spec, cells, data.label_provenance)


def run_depth_study(spec: StudySpec, data: StudyData | None = None) -> StudyResult:
    if spec.model.backbone != "Xception":
        raise ValueError("the depth study is defined on Xception")
    data = _data(spec, data)
    cells = [
        run_cell(f"k{k}", {"trainable_modules": int(k)}, spec.model.with_modules(int(k)), spec.base_config,
                 spec.train_subsample, spec, data)
        for k in spec.grid
    ]
    return StudyResult(spec, cells, data.label_provenance)


def run_sampling_study(spec: StudySpec, data: StudyData | None = None) -> StudyResult:
    data = _data(spec, data)
    cells = [
        run_cell(f"n{n}", {"stride": int(n)}, spec.model, spec.base_config, SubsampleSpec(int(n), 0), spec, data)
        for n in spec.grid
    ]
    return StudyResult(spec, cells, data.label_provenance)


def run_crop_study(spec: StudySpec, data: StudyData | None = None) -> StudyResult:
    data = _data(spec, data)
    cells = []
    for kind in spec.grid:
        config = replace(spec.base_config, crop_policy=CropPolicy(kind))
        cells.append(run_cell(kind, {"crop": kind}, spec.model, config, spec.train_subsample, spec, data))
    result = StudyResult(spec, cells, data.label_provenance)
    result.summary["delta_random_minus_center"] = crop_delta(result)
    return result


def crop_delta(result: StudyResult) -> dict | None:
    """Video- and frame-level metric differences, random minus center."""
    by_name = {c.name: c for c in result.cells if c.status == "ok"}
    if "random" not in by_name or "center" not in by_name:
        return None
    delta = {}
    for level in ("frame", "video"):
        a, b = by_name["random"].report(level), by_name["center"].report(level)
        for m in ("r2", "rmse", "pcc", "srcc"):
            x, y = getattr(a, m), getattr(b, m)
            delta[f"{m}_{level}"] = None if x is None or y is None else x - y
    return delta


RUNNERS = {
    "architecture": run_architecture_study,
    "depth": run_depth_study,
    "sampling": run_sampling_study,
    "crop": run_crop_study,
}


def run_study(spec: StudySpec, data: StudyData | None = None) -> StudyResult:
    return RUNNERS[spec.kind](spec, data)


# -- reporting ---------------------------------------------------------------------


def _fmt(x) -> str:
    return "" if x is None or (isinstance(x, float) and math.isnan(x)) else repr(float(x))


def _write_predictions(preds: metrics.PredictionSet, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["variant_id", "frame_index", "predicted", "label"])
        for e in preds.entries:
            w.writerow([e.variant_id, e.frame_index, repr(e.predicted), repr(e.label)])


def read_predictions(path: str | os.PathLike) -> metrics.PredictionSet:
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    return metrics.PredictionSet(tuple(
        metrics.PredictionEntry(r["variant_id"], int(r["frame_index"]), float(r["predicted"]), float(r["label"]))
        for r in rows
    ))


def _metric_rows(result: StudyResult, key=lambda c: c.name) -> list[list]:
    rows = []
    for c in result.cells:
        if c.status != "ok":
            rows.append([key(c), "", "", "", "", "", "failed"])
            continue
        for level in ("frame", "video"):
            r = c.report(level)
            rows.append([key(c), level, _fmt(r.r2), _fmt(r.rmse), _fmt(r.pcc), _fmt(r.srcc), "ok"])
    return rows


def _write_csv(path: Path, header: Sequence[str], rows: Sequence[Sequence]) -> Path:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
    return path


def write_tables(result: StudyResult, out: Path) -> list[Path]:
    kind = result.spec.kind
    written = []
    if kind == "architecture":
        written.append(_write_csv(out / "table1.csv", ["architecture", "level", "r2", "rmse", "pcc", "srcc", "status"],
                                  _metric_rows(result)))
    elif kind == "depth":
        rows = _metric_rows(result, key=lambda c: c.params["trainable_modules"])
        written.append(_write_csv(out / "depth.csv", ["k", "level", "r2", "rmse", "pcc", "srcc", "status"], rows))
    elif kind == "sampling":
        rows = []
        for c in result.cells:
            if c.status != "ok":
                rows.append([c.params["stride"], c.total_frames, "", "", "", "", "failed"])
                continue
            f, v = c.report("frame"), c.report("video")
            rows.append([c.params["stride"], c.total_frames, _fmt(f.rmse), _fmt(v.rmse), _fmt(f.srcc), _fmt(v.srcc), "ok"])
        written.append(_write_csv(out / "table2.csv",
                                  ["n", "total_frames", "rmse_frame", "rmse_video", "srcc_frame", "srcc_video", "status"],
                                  rows))
    elif kind == "crop":
        rows = _metric_rows(result)
        delta = result.summary.get("delta_random_minus_center")
        if delta:
            for level in ("frame", "video"):
                rows.append(["random-center", level] + [_fmt(delta[f"{m}_{level}"]) for m in ("r2", "rmse", "pcc", "srcc")]
                            + ["delta"])
        written.append(_write_csv(out / "crop.csv", ["crop", "level", "r2", "rmse", "pcc", "srcc", "status"], rows))
    return written


def write_plots(result: StudyResult, out: Path) -> list[Path]:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    written = []
    for c in result.cells:
        if c.status != "ok" or c.predictions is None:
            continue
        fig, axes = plt.subplots(1, 2, figsize=(9, 4.2))
        for ax, preds in zip(axes, (c.predictions, metrics.pool_to_video(c.predictions))):
            ax.scatter(preds.label, preds.predicted, s=6 if preds.level == "frame" else 18, alpha=0.6)
            ax.plot([0, 100], [0, 100], color="k", lw=0.8)
            ax.set_xlim(0, 100)
            ax.set_ylim(min(0, preds.predicted.min()), max(100, preds.predicted.max()))
            ax.set_xlabel("VMAF")
            ax.set_ylabel("predicted")
            r = c.report(preds.level)
            ax.set_title(f"{c.name} ({preds.level}) RMSE {r.rmse:.2f}")
        fig.tight_layout()
        path = out / f"scatter_{c.name}.png"
        fig.savefig(path, dpi=100)
        plt.close(fig)
        written.append(path)

    if result.spec.kind == "depth":
        ok = [c for c in result.cells if c.status == "ok"]
        if ok:
            fig, (a, b) = plt.subplots(1, 2, figsize=(8, 3.5))
            labels = [str(c.params["trainable_modules"]) for c in ok]
            a.bar(labels, [c.report("video").rmse for c in ok])
            a.set_title("video RMSE")
            b.bar(labels, [c.report("video").pcc or 0.0 for c in ok])
            b.set_title("video PCC")
            for ax in (a, b):
                ax.set_xlabel("trainable modules")
            fig.tight_layout()
            path = out / "depth_bars.png"
            fig.savefig(path, dpi=100)
            plt.close(fig)
            written.append(path)
    return written


def emit_report(result: StudyResult, output_dir: str | os.PathLike) -> list[Path]:
    """Write tables (CSV), the full JSON dump and scatter plots to ``output_dir``."""
    out = Path(output_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write-test"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise OSError(f"cannot write report to {out}: {exc}") from exc
    dump = {
        "study": result.spec.provenance(),
        "label_provenance": result.label_provenance,
        "summary": result.summary,
        "failed": result.failed,
        "cells": [c.to_dict() for c in result.cells],
    }
    written = [out / "results.json"]
    (out / "results.json").write_text(json.dumps(dump, indent=2, default=_json_default))
    written += write_tables(result, out)
    written += write_plots(result, out)
    return written


def _json_default(x):
    if isinstance(x, (np.floating, np.integer)):
        return x.item()
    if isinstance(x, float) and math.isnan(x):
        return None
    raise TypeError(f"not JSON serializable: {type(x)}")


def load_result(output_dir: str | os.PathLike) -> StudyResult:
    """Rebuild a StudyResult from ``results.json`` (+ per-cell predictions when present)."""
    out = Path(output_dir)
    dump = json.loads((out / "results.json").read_text())
    s = dump["study"]
    spec = StudySpec(
        kind=s["kind"], output_dir=str(out), grid=tuple(s["grid"]),
        base_config=TrainConfig.from_dict(s["train_config"]), model=ModelSpec(**s["model"]),
        manifest_path=s.get("manifest_path"), cache_root=s.get("cache_root"),
        train_subsample=SubsampleSpec(**s["train_subsample"]),
        validation_subsample=SubsampleSpec(**s["validation_subsample"]),
    )
    cells = []
    for c in dump["cells"]:
        reports = {}
        for key, r in c["reports"].items():
            r = dict(r)
            r["r2"] = r.pop("r2_cod")
            r["undefined"] = tuple(r.get("undefined", ()))
            reports[key] = metrics.EvalReport(**r)
        cell = CellResult(c["name"], c["params"], c["status"], reports, c["history"], c["checkpoint"],
                          c["total_frames"], c["error"])
        pred_path = out / "cells" / c["name"] / "predictions.csv"
        if pred_path.exists():
            cell.predictions = read_predictions(pred_path)
        cells.append(cell)
    return StudyResult(spec, cells, dump.get("label_provenance", {}), dump.get("summary", {}))
