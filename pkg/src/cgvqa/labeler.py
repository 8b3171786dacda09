"""Per-frame VMAF labels and their on-disk cache.

Cache layout: ``<cache_root>/<variant_id>.csv`` (``frame_index,vmaf``) plus
``<variant_id>.meta.json`` carrying tool provenance.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
import os
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from cgvqa import ffmpeg
from cgvqa.manifest import DatasetManifest, EncodedVariant, SourceSequence

log = logging.getLogger(__name__)

DEFAULT_MODEL = "version=vmaf_v0.6.1"


class LabelError(Exception):
    pass


class FrameCountMismatch(LabelError):
    def __init__(self, variant_id: str, distorted: int, reference: int):
        super().__init__(f"{variant_id}: distorted has {distorted} frames, reference has {reference}")
        self.distorted = distorted
        self.reference = reference


@dataclass(frozen=True)
class LabelRecord:
    variant_id: str
    frame_index: int
    vmaf: float

    def __post_init__(self):
        if not 0.0 <= self.vmaf <= 100.0:
            raise LabelError(f"{self.variant_id}[{self.frame_index}]: VMAF {self.vmaf} outside [0, 100]")


@dataclass(frozen=True)
class VideoLabel:
    variant_id: str
    vmaf_mean: float
    frame_count: int


@dataclass(frozen=True)
class ToolConfig:
    executable: str | None = None  # None: $CGVQA_FR_TOOL or the bundled ffmpeg
    model: str = DEFAULT_MODEL
    upscale_filter: str = "bicubic"
    n_threads: int = 1
    timeout: float | None = None

    def resolved_executable(self) -> str:
        return self.executable or ffmpeg.executable()

    def tool_version(self) -> str:
        try:
            return ffmpeg.version(self.resolved_executable())
        except ffmpeg.FFmpegError as exc:
            raise LabelError(f"FR tool unavailable: {exc}") from exc


@dataclass(frozen=True)
class CacheMeta:
    tool_version: str
    model_id: str
    upscale_filter: str
    source_checksum: str = ""
    distorted_checksum: str = ""
    extra: dict = field(default_factory=dict)


def file_checksum(path: str | os.PathLike) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


# indirection point so tests can count tool invocations
def _run_tool(distorted, reference, size, log_path, config: ToolConfig) -> dict:
    return ffmpeg.vmaf_per_frame(
        distorted, reference, size, log_path,
        model=config.model, scale_filter=config.upscale_filter, n_threads=config.n_threads,
        exe=config.resolved_executable(), timeout=config.timeout,
    )


def parse_report(report: dict, variant_id: str) -> list[LabelRecord]:
    try:
        frames = report["frames"]
        pairs = sorted((int(f["frameNum"]), float(f["metrics"]["vmaf"])) for f in frames)
    except (KeyError, TypeError, ValueError) as exc:
        raise LabelError(f"{variant_id}: unparsable VMAF report ({exc})") from exc
    records = []
    for expected, (idx, score) in enumerate(pairs):
        if idx != expected or not math.isfinite(score):
            raise LabelError(f"{variant_id}: bad VMAF report entry at frame {idx}")
        # libvmaf already clips to [0, 100]; guard against float noise at the edges
        records.append(LabelRecord(variant_id, idx, min(100.0, max(0.0, score))))
    return records


def compute_labels(
    variant: EncodedVariant,
    source: SourceSequence,
    tool_config: ToolConfig = ToolConfig(),
    corpus_root: str | os.PathLike = ".",
) -> list[LabelRecord]:
    """Score every frame of ``variant`` against the pristine ``source`` with VMAF."""
    if source.reference_path is None:
        raise LabelError(f"sequence {source.id} has no reference file")
    if variant.frame_count != source.duration_frames:
        raise FrameCountMismatch(variant.id, variant.frame_count, source.duration_frames)
    root = Path(corpus_root)
    with tempfile.TemporaryDirectory(prefix="cgvqa-vmaf-") as tmp:
        log_path = Path(tmp) / "vmaf.json"
        try:
            report = _run_tool(root / variant.file_path, root / source.reference_path,
                               source.native_resolution, log_path, tool_config)
        except ffmpeg.FFmpegError as exc:
            raise LabelError(f"{variant.id}: FR tool failed: {exc}") from exc
    records = parse_report(report, variant.id)
    if len(records) != variant.frame_count:
        raise FrameCountMismatch(variant.id, variant.frame_count, len(records))
    return records


def video_label(records: Sequence[LabelRecord]) -> VideoLabel:
    if not records:
        raise LabelError("cannot pool an empty label list")
    ids = {r.variant_id for r in records}
    if len(ids) != 1:
        raise LabelError(f"records span several variants: {sorted(ids)}")
    return VideoLabel(records[0].variant_id, math.fsum(r.vmaf for r in records) / len(records), len(records))


def _atomic_write(path: Path, text: str) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as f:
            f.write(text)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


class LabelCache:
    def __init__(self, root: str | os.PathLike):
        self.root = Path(root)

    def _paths(self, variant_id: str) -> tuple[Path, Path]:
        return self.root / f"{variant_id}.csv", self.root / f"{variant_id}.meta.json"

    def put(self, variant_id: str, records: Iterable[LabelRecord], meta: CacheMeta) -> None:
        self.root.mkdir(parents=True, exist_ok=True)
        csv_path, meta_path = self._paths(variant_id)
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["frame_index", "vmaf"])
        for r in records:
            if r.variant_id != variant_id:
                raise LabelError(f"record for {r.variant_id} put under {variant_id}")
            w.writerow([r.frame_index, repr(float(r.vmaf))])
        # csv first: a reader requires both files, and meta is written last
        _atomic_write(csv_path, buf.getvalue())
        _atomic_write(meta_path, json.dumps(asdict(meta), indent=2, sort_keys=True))

    def meta(self, variant_id: str) -> CacheMeta | None:
        _, meta_path = self._paths(variant_id)
        try:
            return CacheMeta(**json.loads(meta_path.read_text()))
        except FileNotFoundError:
            return None
        except (ValueError, TypeError) as exc:
            log.warning("corrupt label cache metadata for %s: %s", variant_id, exc)
            return None

    def get(self, variant_id: str, expect: CacheMeta | None = None) -> list[LabelRecord] | None:
        """Cached records, or None when absent, corrupt, or from a different tool setup."""
        csv_path, _ = self._paths(variant_id)
        meta = self.meta(variant_id)
        if meta is None or not csv_path.exists():
            return None
        if expect is not None:
            for key in ("tool_version", "model_id", "upscale_filter", "source_checksum", "distorted_checksum"):
                want = getattr(expect, key)
                if want and getattr(meta, key) != want:
                    log.info("label cache for %s invalidated: %s changed", variant_id, key)
                    return None
        try:
            with open(csv_path, newline="") as f:
                reader = csv.reader(f)
                header = next(reader)
                if header != ["frame_index", "vmaf"]:
                    raise ValueError(f"unexpected header {header}")
                records = [LabelRecord(variant_id, int(i), float(s)) for i, s in reader]
        except (ValueError, StopIteration, LabelError) as exc:
            log.warning("corrupt label cache for %s: %s", variant_id, exc)
            return None
        if [r.frame_index for r in records] != list(range(len(records))):
            log.warning("corrupt label cache for %s: non-contiguous frame indices", variant_id)
            return None
        return records


def label_variant(
    manifest: DatasetManifest,
    variant_id: str,
    cache: LabelCache,
    tool_config: ToolConfig = ToolConfig(),
    corpus_root: str | os.PathLike = ".",
    *,
    verify_checksums: bool = True,
) -> list[LabelRecord]:
    """Labels for one variant, from cache when the provenance matches."""
    variant = manifest.variant(variant_id)
    source = manifest.sequence(variant.source)
    root = Path(corpus_root)
    expect = CacheMeta(tool_config.tool_version(), tool_config.model, tool_config.upscale_filter)
    if verify_checksums and source.reference_path is not None:
        expect = CacheMeta(expect.tool_version, expect.model_id, expect.upscale_filter,
                           file_checksum(root / source.reference_path), file_checksum(root / variant.file_path))
    records = cache.get(variant_id, expect)
    if records is not None and len(records) == variant.frame_count:
        return records
    records = compute_labels(variant, source, tool_config, root)
    if not expect.source_checksum and source.reference_path is not None:
        expect = CacheMeta(expect.tool_version, expect.model_id, expect.upscale_filter,
                           file_checksum(root / source.reference_path), file_checksum(root / variant.file_path))
    cache.put(variant_id, records, expect)
    return records


def load_labels(manifest: DatasetManifest, cache: LabelCache, variant_ids: Iterable[str] | None = None) -> dict[tuple[str, int], float]:
    """Read cached labels into a ``{(variant_id, frame_index): vmaf}`` map (no tool runs)."""
    labels = {}
    ids = [v.id for v in manifest.variants] if variant_ids is None else variant_ids
    for vid in ids:
        records = cache.get(vid)
        if records is None:
            continue
        labels.update(((r.variant_id, r.frame_index), r.vmaf) for r in records)
    return labels
