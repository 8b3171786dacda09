"""Synthetic corpora and in-memory fixtures with known ground truth."""
from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from cgvqa import ffmpeg
from cgvqa.manifest import DatasetManifest, EncodedVariant, GameTitle, SourceSequence
from cgvqa.media import ArrayFrameStore


def solid_frames(count: int, size: tuple[int, int], step: int = 20) -> list[np.ndarray]:
    """Frame ``i`` is uniformly gray level ``step * i``."""
    w, h = size
    return [np.full((h, w, 3), (step * i) % 256, np.uint8) for i in range(count)]


def texture_frames(count: int, size: tuple[int, int], seed: int = 0) -> list[np.ndarray]:
    """Smoothly moving colour texture; cheap to encode but not trivially compressible."""
    w, h = size
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float32)
    freqs = rng.uniform(0.01, 0.08, (3, 2))
    noise = rng.integers(0, 40, (h, w, 3)).astype(np.float32)
    frames = []
    for t in range(count):
        chans = [127 + 80 * np.sin(freqs[c, 0] * xx + freqs[c, 1] * yy + 0.3 * t + c) for c in range(3)]
        img = np.stack(chans, axis=-1) + noise - 20
        frames.append(np.clip(img, 0, 255).astype(np.uint8))
    return frames


@dataclass(frozen=True)
class VariantSpec:
    name: str
    bitrate_kbps: int
    size: tuple[int, int]  # (width, height)


def write_corpus(
    root: str | os.PathLike,
    games: int = 2,
    sequences_per_game: int = 1,
    variants: Sequence[VariantSpec] = (
        VariantSpec("360p_200k", 200, (640, 360)),
        VariantSpec("360p_1000k", 1000, (640, 360)),
        VariantSpec("240p_300k", 300, (426, 240)),
    ),
    frames: int | Sequence[int] = 12,
    native_size: tuple[int, int] = (640, 360),
    fps: int = 30,
    seed: int = 0,
    content: str = "texture",
) -> dict[str, int]:
    """Write ``<root>/<game>/<seq>/{source,<variant>}.mp4`` and return the frame count per file.

    ``frames`` may be a per-sequence list.  Variants are real H.264 encodes of
    the lossless source at the requested bitrate and resolution.
    """
    root = Path(root)
    counts: dict[str, int] = {}
    k = 0
    for g in range(games):
        for s in range(sequences_per_game):
            n = frames if isinstance(frames, int) else frames[k]
            seq_dir = root / f"game{g:02d}" / f"seq{s}"
            seq_dir.mkdir(parents=True, exist_ok=True)
            if content == "solid":
                pix = solid_frames(n, native_size)
            else:
                pix = texture_frames(n, native_size, seed=seed + 1000 * g + s)
            src = seq_dir / "source.mp4"
            ffmpeg.encode_frames(pix, src, fps=fps)
            counts[src.relative_to(root).as_posix()] = n
            for v in variants:
                dst = seq_dir / f"{v.name}.mp4"
                ffmpeg.transcode(src, dst, [
                    "-vf", f"scale={v.size[0]}:{v.size[1]}:flags=bicubic", "-c:v", "libx264", "-preset", "veryfast",
                    "-b:v", f"{v.bitrate_kbps}k", "-maxrate", f"{v.bitrate_kbps}k", "-bufsize", f"{2 * v.bitrate_kbps}k",
                    "-pix_fmt", "yuv420p", "-an",
                ])
                counts[dst.relative_to(root).as_posix()] = n
            k += 1
    return counts


def paper_like_manifest(
    games: int = 12,
    sequences_per_game: int = 2,
    variant_frames: Sequence[int] = (900, 900),
) -> DatasetManifest:
    """In-memory manifest with a GamingVideoSET-like shape (no files behind it)."""
    game_list, seqs, variants = [], [], []
    for g in range(games):
        gid = f"game{g:02d}"
        game_list.append(GameTitle(gid, f"Game {g}"))
        for s in range(sequences_per_game):
            sid = f"{gid}__seq{s}"
            seqs.append(SourceSequence(sid, gid, max(variant_frames), (1920, 1080), 30.0))
            for j, n in enumerate(variant_frames):
                vid = f"{sid}__v{j}"
                variants.append(EncodedVariant(vid, sid, "H264", 1000.0 * (j + 1), (1920, 1080), f"{gid}/seq{s}/v{j}.mp4", n))
    return DatasetManifest(tuple(game_list), tuple(seqs), tuple(variants))


@dataclass
class LuminanceFixture:
    """Frames whose label is their mean luminance mapped to [0, 100]."""

    frames: ArrayFrameStore
    plan: list[tuple[str, int]]
    labels: dict[tuple[str, int], float]


def luminance_fixture(
    count: int = 32,
    size: tuple[int, int] = (320, 320),
    seed: int = 0,
    levels: tuple[float, float] = (0.2, 0.8),
    noise: float = 0.05,
    frames_per_variant: int = 8,
) -> LuminanceFixture:
    """Gray frames with fine noise; any 299x299 patch has nearly the frame's mean.

    Labels are ``100 * mean(frame) / 255`` so the task is learnable by construction.
    """
    w, h = size
    rng = np.random.default_rng(seed)
    lum = rng.uniform(*levels, count)
    frames, labels, plan = {}, {}, []
    for i, l in enumerate(lum):
        key = (f"lum{i // frames_per_variant:03d}", i % frames_per_variant)
        px = np.clip(l + rng.normal(0.0, noise, (h, w, 1)), 0.0, 1.0)
        img = np.repeat(np.round(px * 255).astype(np.uint8), 3, axis=2)
        frames[key] = img
        labels[key] = float(img.mean() * 100.0 / 255.0)
        plan.append(key)
    return LuminanceFixture(ArrayFrameStore(frames), plan, labels)


def desk_study_data(
    games: int = 3,
    sequences_per_game: int = 2,
    frames_per_variant: int = 4,
    variants_per_sequence: int = 2,
    size: tuple[int, int] = (320, 320),
    seed: int = 0,
    validation_games: Sequence[str] = ("game02",),
    overlap_games: Sequence[str] = ("game00",),
):
    """Manifest with a split, luminance labels and in-memory frames for study smoke runs.

    Returns ``(manifest, labels, frames)``.  Each variant has its own brightness
    so video-level pooling has something to rank.
    """
    from cgvqa.manifest import build_split

    m = paper_like_manifest(games, sequences_per_game, (frames_per_variant,) * variants_per_sequence)
    m = m.with_split(build_split(m, set(validation_games), set(overlap_games), seed))
    rng = np.random.default_rng(seed)
    w, h = size
    frames, labels = {}, {}
    for v in m.variants:
        base = rng.uniform(0.15, 0.85)
        for i in range(v.frame_count):
            lum = np.clip(base + rng.normal(0, 0.03) + rng.normal(0.0, 0.05, (h, w, 1)), 0, 1)
            img = np.repeat(np.round(lum * 255).astype(np.uint8), 3, axis=2)
            frames[(v.id, i)] = img
            labels[(v.id, i)] = float(img.mean() * 100.0 / 255.0)
    return m, labels, ArrayFrameStore(frames)
