"""Corpus inventory, train/validation splits and frame sampling plans.

A corpus on disk looks like ``<root>/<game>/<sequence>/<variant>.mp4``.  A file
named ``source.<ext>`` inside a sequence directory is the pristine reference
used for labeling; every other video file is an encoded variant.
"""
from __future__ import annotations

import dataclasses
import json
import logging
import os
import random
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Literal

from cgvqa import ffmpeg

log = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"
MANIFEST_VERSION = 1
VIDEO_EXTENSIONS = (".mp4", ".mkv", ".mov", ".avi", ".y4m")
SOURCE_STEM = "source"
SUPPORTED_CODECS = {"h264": "H264"}

Side = Literal["train", "validation"]


class ManifestError(Exception):
    pass


class SplitError(ManifestError):
    pass


@dataclass(frozen=True)
class GameTitle:
    id: str
    display_name: str

    def __post_init__(self):
        if not self.id:
            raise ManifestError("game id must be non-empty")


@dataclass(frozen=True)
class SourceSequence:
    id: str
    game: str
    duration_frames: int
    native_resolution: tuple[int, int]
    native_framerate: float
    reference_path: str | None = None
    reference_checksum: str | None = None

    def __post_init__(self):
        if self.duration_frames < 1:
            raise ManifestError(f"sequence {self.id}: duration_frames must be >= 1")


@dataclass(frozen=True)
class EncodedVariant:
    id: str
    source: str
    codec: str
    bitrate: float  # kbit/s
    resolution: tuple[int, int]  # (width, height)
    file_path: str  # corpus-relative
    frame_count: int
    file_size: int = 0
    mtime_ns: int = 0

    def __post_init__(self):
        if self.frame_count < 1:
            raise ManifestError(f"variant {self.id}: frame_count must be >= 1")


@dataclass(frozen=True)
class SplitSpec:
    train_sequences: frozenset[str]
    validation_sequences: frozenset[str]
    overlap_games: frozenset[str] = frozenset()

    def __post_init__(self):
        both = self.train_sequences & self.validation_sequences
        if both:
            raise SplitError(f"sequences in both splits: {sorted(both)}")

    def side_of(self, sequence_id: str) -> Side | None:
        if sequence_id in self.train_sequences:
            return "train"
        if sequence_id in self.validation_sequences:
            return "validation"
        return None


@dataclass(frozen=True)
class SubsampleSpec:
    n: int = 1
    phase: int = 0

    def __post_init__(self):
        if self.n < 1:
            raise ValueError(f"stride n must be >= 1, got {self.n}")
        if not 0 <= self.phase < self.n:
            raise ValueError(f"phase must be in [0, {self.n}), got {self.phase}")


@dataclass(frozen=True)
class DatasetManifest:
    games: tuple[GameTitle, ...] = ()
    sequences: tuple[SourceSequence, ...] = ()
    variants: tuple[EncodedVariant, ...] = ()
    split: SplitSpec | None = None
    errors: tuple[dict, ...] = ()
    decode_at_display_resolution: bool = True
    train_frames: int = field(init=False, default=0)
    validation_frames: int = field(init=False, default=0)

    def __post_init__(self):
        _check_unique("game", [g.id for g in self.games])
        _check_unique("sequence", [s.id for s in self.sequences])
        _check_unique("variant", [v.id for v in self.variants])
        game_ids = {g.id for g in self.games}
        seq_ids = {s.id for s in self.sequences}
        for s in self.sequences:
            if s.game not in game_ids:
                raise ManifestError(f"sequence {s.id} refers to unknown game {s.game}")
        for v in self.variants:
            if v.source not in seq_ids:
                raise ManifestError(f"variant {v.id} refers to unknown sequence {v.source}")
        if self.split is not None:
            unknown = (self.split.train_sequences | self.split.validation_sequences) - seq_ids
            if unknown:
                raise SplitError(f"split refers to unknown sequences {sorted(unknown)}")
        train = validation = 0
        if self.split is not None:
            for v in self.variants:
                side = self.split.side_of(v.source)
                if side == "train":
                    train += v.frame_count
                elif side == "validation":
                    validation += v.frame_count
        object.__setattr__(self, "train_frames", train)
        object.__setattr__(self, "validation_frames", validation)
        object.__setattr__(self, "_games", {g.id: g for g in self.games})
        object.__setattr__(self, "_sequences", {s.id: s for s in self.sequences})
        object.__setattr__(self, "_variants", {v.id: v for v in self.variants})

    def game(self, game_id: str) -> GameTitle:
        return self._games[game_id]

    def sequence(self, sequence_id: str) -> SourceSequence:
        return self._sequences[sequence_id]

    def variant(self, variant_id: str) -> EncodedVariant:
        return self._variants[variant_id]

    def game_of_variant(self, variant_id: str) -> str:
        return self.sequence(self.variant(variant_id).source).game

    def sequences_of(self, game_id: str) -> list[SourceSequence]:
        return sorted((s for s in self.sequences if s.game == game_id), key=lambda s: s.id)

    def variants_of(self, sequence_id: str) -> list[EncodedVariant]:
        return sorted((v for v in self.variants if v.source == sequence_id), key=lambda v: v.id)

    def side_variants(self, side: Side) -> list[EncodedVariant]:
        if self.split is None:
            raise SplitError("manifest has no split assigned")
        seqs = self.split.train_sequences if side == "train" else self.split.validation_sequences
        return sorted((v for v in self.variants if v.source in seqs), key=lambda v: v.id)

    def seen_games(self) -> set[str]:
        """Games that contribute at least one training sequence."""
        if self.split is None:
            raise SplitError("manifest has no split assigned")
        return {self.sequence(s).game for s in self.split.train_sequences}

    def with_split(self, split: SplitSpec | None) -> "DatasetManifest":
        return dataclasses.replace(self, split=split)

    # -- persistence -----------------------------------------------------

    def to_dict(self) -> dict:
        d = {
            "version": MANIFEST_VERSION,
            "decode_at_display_resolution": self.decode_at_display_resolution,
            "games": [dataclasses.asdict(g) for g in self.games],
            "sequences": [dataclasses.asdict(s) for s in self.sequences],
            "variants": [
                {k: v for k, v in dataclasses.asdict(var).items()} for var in self.variants
            ],
            "split": None,
            "errors": list(self.errors),
            "totals": {"train_frames": self.train_frames, "validation_frames": self.validation_frames},
        }
        if self.split is not None:
            d["split"] = {
                "train_sequences": sorted(self.split.train_sequences),
                "validation_sequences": sorted(self.split.validation_sequences),
                "overlap_games": sorted(self.split.overlap_games),
            }
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetManifest":
        version = d.get("version", MANIFEST_VERSION)
        if version != MANIFEST_VERSION:
            raise ManifestError(f"unsupported manifest version {version}")
        split = None
        if d.get("split"):
            s = d["split"]
            split = SplitSpec(
                frozenset(s["train_sequences"]),
                frozenset(s["validation_sequences"]),
                frozenset(s.get("overlap_games", ())),
            )
        seqs = []
        for s in d.get("sequences", []):
            s = dict(s)
            s["native_resolution"] = tuple(s["native_resolution"])
            seqs.append(SourceSequence(**s))
        variants = []
        for v in d.get("variants", []):
            v = dict(v)
            v["resolution"] = tuple(v["resolution"])
            variants.append(EncodedVariant(**v))
        return cls(
            games=tuple(GameTitle(**g) for g in d.get("games", [])),
            sequences=tuple(seqs),
            variants=tuple(variants),
            split=split,
            errors=tuple(d.get("errors", [])),
            decode_at_display_resolution=d.get("decode_at_display_resolution", True),
        )

    def save(self, path: str | os.PathLike) -> None:
        path = Path(path)
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_text(json.dumps(self.to_dict(), indent=2))
        os.replace(tmp, path)

    @classmethod
    def load(cls, path: str | os.PathLike) -> "DatasetManifest":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _check_unique(kind: str, ids: list[str]) -> None:
    seen = set()
    for i in ids:
        if i in seen:
            raise ManifestError(f"duplicate {kind} id: {i}")
        seen.add(i)


# -- scanning ----------------------------------------------------------------

_RES_RE = re.compile(r"(\d{2,5})x(\d{2,5})")


def _sequence_id(game: str, seq: str) -> str:
    return f"{game}__{seq}"


def _variant_id(game: str, seq: str, stem: str) -> str:
    return f"{game}__{seq}__{stem}"


@dataclass
class _Probe:
    frame_count: int
    width: int
    height: int
    fps: float
    codec: str
    duration: float


def _probe(path: Path, cached: EncodedVariant | None, stat: os.stat_result) -> _Probe:
    info = ffmpeg.probe(path)
    if cached is not None and cached.file_size == stat.st_size and cached.mtime_ns == stat.st_mtime_ns:
        frame_count = cached.frame_count
    else:
        frame_count = ffmpeg.count_frames(path)
    return _Probe(frame_count, info.width, info.height, info.fps, info.codec, info.duration)


def scan_corpus(
    root: str | os.PathLike,
    *,
    workers: int = 1,
    decode_at_display_resolution: bool = True,
    previous: DatasetManifest | None = None,
) -> DatasetManifest:
    """Inventory every video under ``root`` and return a manifest without a split.

    Frame counts come from a full decode.  When ``previous`` (or an existing
    ``manifest.json`` under root) lists a variant with unchanged size and
    mtime, its frame count is reused instead.
    """
    root = Path(root)
    if not root.is_dir():
        raise ManifestError(f"corpus root does not exist: {root}")
    if previous is None and (root / MANIFEST_NAME).exists():
        try:
            previous = DatasetManifest.load(root / MANIFEST_NAME)
        except (ManifestError, ValueError, KeyError, TypeError) as exc:
            log.warning("ignoring unreadable %s: %s", root / MANIFEST_NAME, exc)
    cached = {v.id: v for v in previous.variants} if previous else {}

    # (game, seq, stem, path, is_source)
    entries: list[tuple[str, str, str, Path, bool]] = []
    seen_ids: dict[str, Path] = {}
    for game_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        for seq_dir in sorted(p for p in game_dir.iterdir() if p.is_dir()):
            for f in sorted(seq_dir.iterdir()):
                if not f.is_file() or f.suffix.lower() not in VIDEO_EXTENSIONS:
                    continue
                is_source = f.stem == SOURCE_STEM
                vid = _variant_id(game_dir.name, seq_dir.name, f.stem)
                if vid in seen_ids:
                    raise ManifestError(f"duplicate variant id {vid}: {seen_ids[vid]} and {f}")
                seen_ids[vid] = f
                entries.append((game_dir.name, seq_dir.name, f.stem, f, is_source))

    def work(entry):
        game, seq, stem, path, _ = entry
        st = path.stat()
        try:
            return entry, st, _probe(path, cached.get(_variant_id(game, seq, stem)), st), None
        except ffmpeg.FFmpegError as exc:
            return entry, st, None, str(exc)

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(work, entries))
    else:
        results = [work(e) for e in entries]

    errors: list[dict] = []
    refs: dict[tuple[str, str], tuple[Path, _Probe]] = {}
    encoded: dict[tuple[str, str], list] = {}
    for (game, seq, stem, path, is_source), st, probe, err in results:
        rel = path.relative_to(root).as_posix()
        if err is not None:
            errors.append({"path": rel, "error": err})
            continue
        if probe.frame_count < 1:
            errors.append({"path": rel, "error": "no decodable frames"})
            continue
        if is_source:
            refs[(game, seq)] = (path, probe)
            continue
        codec = SUPPORTED_CODECS.get(probe.codec)
        if codec is None:
            errors.append({"path": rel, "error": f"unsupported codec {probe.codec!r}"})
            continue
        bitrate = st.st_size * 8 / 1000 / probe.duration if probe.duration > 0 else 0.0
        variant = EncodedVariant(
            id=_variant_id(game, seq, stem),
            source=_sequence_id(game, seq),
            codec=codec,
            bitrate=round(bitrate, 3),
            resolution=(probe.width, probe.height),
            file_path=rel,
            frame_count=probe.frame_count,
            file_size=st.st_size,
            mtime_ns=st.st_mtime_ns,
        )
        encoded.setdefault((game, seq), []).append((variant, probe))

    games, sequences, variants = {}, [], []
    for (game, seq) in sorted(set(encoded) | set(refs)):
        items = encoded.get((game, seq), [])
        if (game, seq) in refs:
            path, p = refs[(game, seq)]
            native = (p.width, p.height)
            duration, fps = p.frame_count, p.fps
            ref_rel = path.relative_to(root).as_posix()
        else:
            native = max((v.resolution for v, _ in items), key=lambda r: r[0] * r[1])
            duration = max(v.frame_count for v, _ in items)
            fps = max(p.fps for _, p in items)
            ref_rel = None
        games.setdefault(game, GameTitle(game, game.replace("_", " ")))
        sequences.append(
            SourceSequence(
                id=_sequence_id(game, seq),
                game=game,
                duration_frames=duration,
                native_resolution=native,
                native_framerate=fps,
                reference_path=ref_rel,
            )
        )
        for v, _ in items:
            if v.resolution[0] > native[0] or v.resolution[1] > native[1]:
                errors.append({"path": v.file_path, "error": "resolution exceeds source resolution"})
                continue
            variants.append(v)

    for e in errors:
        log.warning("scan: %s: %s", e["path"], e["error"])
    return DatasetManifest(
        games=tuple(games.values()),
        sequences=tuple(sequences),
        variants=tuple(sorted(variants, key=lambda v: v.id)),
        errors=tuple(errors),
        decode_at_display_resolution=decode_at_display_resolution,
    )


# -- splitting ---------------------------------------------------------------


def build_split(
    manifest: DatasetManifest,
    validation_games: Iterable[str],
    overlap_games: Iterable[str],
    seed: int = 0,
) -> SplitSpec:
    """Assign sequences to train and validation.

    All sequences of ``validation_games`` go to validation.  Each overlap game
    sends one sequence (chosen by ``seed``) to validation and keeps the rest in
    training.  Every other game is training-only.
    """
    validation_games = set(validation_games)
    overlap_games = set(overlap_games)
    known = {g.id for g in manifest.games}
    unknown = (validation_games | overlap_games) - known
    if unknown:
        raise SplitError(f"unknown games: {sorted(unknown)}")
    both = validation_games & overlap_games
    if both:
        raise SplitError(f"games cannot be both validation-only and overlap: {sorted(both)}")

    train: set[str] = set()
    validation: set[str] = set()
    for game in sorted(known):
        seqs = [s.id for s in manifest.sequences_of(game)]
        if game in validation_games:
            validation.update(seqs)
        elif game in overlap_games:
            if len(seqs) < 2:
                raise SplitError(f"overlap game {game} needs at least 2 sequences, has {len(seqs)}")
            # string seeds hash stably (sha512), unlike hash()
            held_out = random.Random(f"{seed}:{game}").choice(seqs)
            validation.add(held_out)
            train.update(s for s in seqs if s != held_out)
        else:
            train.update(seqs)
    if not validation:
        raise SplitError("validation set would be empty")
    return SplitSpec(frozenset(train), frozenset(validation), frozenset(overlap_games))


# -- frame plans -------------------------------------------------------------


def plan_frames(
    manifest: DatasetManifest, side: Side, sub: SubsampleSpec = SubsampleSpec()
) -> list[tuple[str, int]]:
    """Every ``sub.n``-th frame of each variant on ``side``, starting at ``sub.phase``."""
    plan = []
    for v in manifest.side_variants(side):
        plan.extend((v.id, i) for i in range(sub.phase, v.frame_count, sub.n))
    return plan
