"""Accuracy and correlation metrics, video-level pooling, seen/unseen breakdown."""
from __future__ import annotations

import csv
import json
import math
from collections import defaultdict
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Literal, Sequence

import numpy as np
from scipy.stats import rankdata

from cgvqa.manifest import DatasetManifest

Level = Literal["frame", "video"]
Group = Literal["all", "seen_games", "unseen_games"]


class MetricError(ValueError):
    """A metric is undefined for the given input (e.g. zero variance)."""


@dataclass(frozen=True)
class PredictionEntry:
    variant_id: str
    frame_index: int | None  # None at video level
    predicted: float
    label: float


@dataclass(frozen=True)
class PredictionSet:
    entries: tuple[PredictionEntry, ...]
    level: Level = "frame"

    def __post_init__(self):
        keys = [(e.variant_id, e.frame_index) for e in self.entries]
        if len(set(keys)) != len(keys):
            raise ValueError("duplicate (variant, frame) entries in prediction set")

    @classmethod
    def from_arrays(cls, keys: Sequence[tuple[str, int]], predicted, label, level: Level = "frame") -> "PredictionSet":
        return cls(tuple(PredictionEntry(v, i, float(p), float(y)) for (v, i), p, y in zip(keys, predicted, label)), level)

    @property
    def predicted(self) -> np.ndarray:
        return np.array([e.predicted for e in self.entries], dtype=np.float64)

    @property
    def label(self) -> np.ndarray:
        return np.array([e.label for e in self.entries], dtype=np.float64)

    def __len__(self):
        return len(self.entries)

    def subset(self, variant_ids: set[str]) -> "PredictionSet":
        return PredictionSet(tuple(e for e in self.entries if e.variant_id in variant_ids), self.level)


def _pair(x, y) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.shape != y.shape:
        raise ValueError(f"length mismatch: {x.size} vs {y.size}")
    if x.size == 0:
        raise ValueError("empty input")
    return x, y


def rmse(predicted, label) -> float:
    p, y = _pair(predicted, label)
    return float(np.sqrt(np.mean((p - y) ** 2)))


def pcc(x, y) -> float:
    x, y = _pair(x, y)
    if x.size < 2:
        raise MetricError("PCC needs at least two samples")
    if np.all(x == x[0]) or np.all(y == y[0]):
        raise MetricError("PCC undefined: zero variance")
    dx = x - x.mean()
    dy = y - y.mean()
    sxx = float(dx @ dx)
    syy = float(dy @ dy)
    denom = math.sqrt(sxx) * math.sqrt(syy)
    if denom == 0.0 or not math.isfinite(denom):
        # spread too small (or large) to represent, e.g. subnormal differences
        raise MetricError("PCC undefined: variance not representable")
    r = float(dx @ dy) / denom
    return max(-1.0, min(1.0, r))


def srcc(x, y) -> float:
    """Spearman correlation with average ranks for ties."""
    x, y = _pair(x, y)
    if x.size < 2:
        raise MetricError("SRCC needs at least two samples")
    if np.all(x == x[0]) or np.all(y == y[0]):
        raise MetricError("SRCC undefined: all-equal input")
    return pcc(rankdata(x), rankdata(y))


def r2(predicted, label) -> float:
    """Coefficient of determination of ``predicted`` against ``label``."""
    p, y = _pair(predicted, label)
    if p.size < 2:
        raise MetricError("R^2 needs at least two samples")
    if np.all(y == y[0]):
        raise MetricError("R^2 undefined: zero label variance")
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    if ss_tot == 0.0 or not math.isfinite(ss_tot):
        raise MetricError("R^2 undefined: label variance not representable")
    return 1.0 - float(np.sum((y - p) ** 2)) / ss_tot


def pool_to_video(frames: PredictionSet) -> PredictionSet:
    """Average frame predictions and labels per variant."""
    if not frames.entries:
        raise ValueError("cannot pool an empty prediction set")
    preds: dict[str, list[float]] = defaultdict(list)
    labels: dict[str, list[float]] = defaultdict(list)
    for e in frames.entries:
        preds[e.variant_id].append(e.predicted)
        labels[e.variant_id].append(e.label)
    entries = tuple(
        PredictionEntry(vid, None, math.fsum(preds[vid]) / len(preds[vid]), math.fsum(labels[vid]) / len(labels[vid]))
        for vid in sorted(preds)
    )
    return PredictionSet(entries, "video")


@dataclass(frozen=True)
class EvalReport:
    r2: float | None  # coefficient of determination
    rmse: float
    pcc: float | None
    srcc: float | None
    level: Level
    group: Group = "all"
    n: int = 0
    pcc_squared: float | None = None
    undefined: tuple[str, ...] = ()

    def to_dict(self) -> dict:
        d = asdict(self)
        d["r2_cod"] = d.pop("r2")
        d["undefined"] = list(self.undefined)
        return d


def evaluate(predictions: PredictionSet, group: Group = "all") -> EvalReport:
    """All metrics for one prediction set; undefined correlations become None."""
    if not predictions.entries:
        raise ValueError(f"empty prediction set for group {group}")
    p, y = predictions.predicted, predictions.label
    values = {}
    undefined = []
    for name, fn in (("r2", r2), ("pcc", pcc), ("srcc", srcc)):
        try:
            values[name] = fn(p, y)
        except MetricError:
            values[name] = None
            undefined.append(name)
    r = values["pcc"]
    return EvalReport(
        r2=values["r2"], rmse=rmse(p, y), pcc=r, srcc=values["srcc"], level=predictions.level,
        group=group, n=len(predictions), pcc_squared=None if r is None else r * r, undefined=tuple(undefined),
    )


def breakdown_by_seen(predictions: PredictionSet, manifest: DatasetManifest) -> tuple[EvalReport, EvalReport]:
    """Reports for validation variants whose game is / is not also in training."""
    seen_games = manifest.seen_games()
    variant_ids = {e.variant_id for e in predictions.entries}
    seen = {v for v in variant_ids if manifest.game_of_variant(v) in seen_games}
    unseen = variant_ids - seen
    if not seen:
        raise ValueError("group seen_games is empty")
    if not unseen:
        raise ValueError("group unseen_games is empty")
    return evaluate(predictions.subset(seen), "seen_games"), evaluate(predictions.subset(unseen), "unseen_games")


def write_reports_json(reports: Iterable[EvalReport], path: str | Path) -> None:
    Path(path).write_text(json.dumps([r.to_dict() for r in reports], indent=2))


def write_table1_csv(rows: Iterable[tuple[str, EvalReport | None]], path: str | Path) -> None:
    """``architecture,level,r2,rmse,pcc,srcc`` rows; a None report marks a failed cell."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["architecture", "level", "r2", "rmse", "pcc", "srcc", "status"])
        for name, rep in rows:
            if rep is None:
                w.writerow([name, "", "", "", "", "", "failed"])
            else:
                w.writerow([name, rep.level, _fmt(rep.r2), _fmt(rep.rmse), _fmt(rep.pcc), _fmt(rep.srcc), "ok"])


def _fmt(x: float | None) -> str:
    return "" if x is None else repr(float(x))
