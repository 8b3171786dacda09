"""Frame decoding and 299x299 patch sampling."""
from __future__ import annotations

import hashlib
import os
import threading
from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Literal, Mapping

import numpy as np

from cgvqa import ffmpeg
from cgvqa.manifest import DatasetManifest

PATCH_SIZE = (299, 299)


class DecodeError(Exception):
    def __init__(self, variant_id: str, frame_index: int, message: str):
        super().__init__(f"{variant_id}[{frame_index}]: {message}")
        self.variant_id = variant_id
        self.frame_index = frame_index


class FrameTooSmallError(ValueError):
    pass


@dataclass(frozen=True)
class FrameRef:
    variant_id: str
    frame_index: int

    def __post_init__(self):
        if self.frame_index < 0:
            raise ValueError(f"negative frame index {self.frame_index}")


@dataclass(frozen=True)
class CropPolicy:
    kind: Literal["random", "center"] = "random"
    patch_size: tuple[int, int] = PATCH_SIZE

    def __post_init__(self):
        if self.kind not in ("random", "center"):
            raise ValueError(f"unknown crop policy {self.kind!r}")
        if tuple(self.patch_size) != PATCH_SIZE:
            raise ValueError(f"patch size is fixed at {PATCH_SIZE}, got {self.patch_size}")


RANDOM = CropPolicy("random")
CENTER = CropPolicy("center")


@dataclass(frozen=True, eq=False)
class Patch:
    pixels: np.ndarray  # (299, 299, 3) uint8 RGB
    origin: tuple[int, int]  # (top, left)
    source: FrameRef | None
    policy: CropPolicy
    seed_used: int | None


def derive_seed(root_seed: int, *names) -> int:
    """Stable 64-bit seed for a named stream, e.g. ``derive_seed(7, "worker", 0, "epoch", 3)``."""
    key = ":".join(str(x) for x in (root_seed, *names)).encode()
    return int.from_bytes(hashlib.sha256(key).digest()[:8], "little")


def rng_stream(root_seed: int, *names) -> np.random.Generator:
    return np.random.default_rng(derive_seed(root_seed, *names))


def crop_origin(height: int, width: int, policy: CropPolicy, rng: np.random.Generator | None) -> tuple[int, int]:
    ph, pw = policy.patch_size
    if height < ph or width < pw:
        raise FrameTooSmallError(f"frame {height}x{width} is smaller than the {ph}x{pw} patch")
    if policy.kind == "center":
        return (height - ph) // 2, (width - pw) // 2
    if rng is None:
        raise ValueError("random crop policy needs an rng")
    top = int(rng.integers(0, height - ph + 1))
    left = int(rng.integers(0, width - pw + 1))
    return top, left


def sample_patch(
    frame: np.ndarray,
    policy: CropPolicy,
    rng: np.random.Generator | int | None = None,
    source: FrameRef | None = None,
) -> Patch:
    """Cut one patch out of ``frame``; ``rng`` may be a Generator or an int seed."""
    seed = None
    if isinstance(rng, (int, np.integer)):
        seed = int(rng)
        rng = np.random.default_rng(seed)
    elif isinstance(rng, np.random.Generator):
        entropy = getattr(rng.bit_generator.seed_seq, "entropy", None)
        seed = int(entropy) if isinstance(entropy, int) else None
    top, left = crop_origin(frame.shape[0], frame.shape[1], policy, rng)
    ph, pw = policy.patch_size
    pixels = frame[top:top + ph, left:left + pw]
    return Patch(pixels, (top, left), source, policy, seed if policy.kind == "random" else None)


def dump_patch(patch: Patch, directory: str | os.PathLike) -> Path:
    """Write a patch as PNG named ``<variant>_<frame>_<top>_<left>.png`` (debugging aid)."""
    from PIL import Image

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    variant, frame = (patch.source.variant_id, patch.source.frame_index) if patch.source else ("unknown", -1)
    path = directory / f"{variant}_{frame}_{patch.origin[0]}_{patch.origin[1]}.png"
    Image.fromarray(np.ascontiguousarray(patch.pixels)).save(path)
    return path


# -- frame access ------------------------------------------------------------


class VideoFrameStore:
    """Decodes frames of manifest variants, keeping a bounded in-memory cache.

    ``get`` is safe to call from loader threads; ``preload`` is not and should
    run before they start.  ``preload`` decodes all requested frames of a variant in a single pass,
    which is far cheaper than per-frame seeks.
    """

    def __init__(self, manifest: DatasetManifest, root: str | os.PathLike, *, max_cached_bytes: int = 2 << 30,
                 decode_at_display_resolution: bool | None = None):
        self.manifest = manifest
        self.root = Path(root)
        self.display = manifest.decode_at_display_resolution if decode_at_display_resolution is None \
            else decode_at_display_resolution
        self.max_cached_bytes = max_cached_bytes
        self._cache: OrderedDict[tuple[str, int], np.ndarray] = OrderedDict()
        self._bytes = 0
        self._lock = threading.RLock()

    def output_size(self, variant_id: str) -> tuple[int, int]:
        v = self.manifest.variant(variant_id)
        if self.display:
            return self.manifest.sequence(v.source).native_resolution
        return v.resolution

    def _check(self, variant_id: str, frame_index: int):
        try:
            v = self.manifest.variant(variant_id)
        except KeyError:
            raise DecodeError(variant_id, frame_index, "unknown variant") from None
        if not 0 <= frame_index < v.frame_count:
            raise DecodeError(variant_id, frame_index, f"index out of range (frame_count={v.frame_count})")
        return v

    def _remember(self, key, frame):
        if key in self._cache:
            return
        self._cache[key] = frame
        self._bytes += frame.nbytes
        while self._bytes > self.max_cached_bytes and len(self._cache) > 1:
            _, old = self._cache.popitem(last=False)
            self._bytes -= old.nbytes

    def preload(self, variant_id: str, indices: Iterable[int]) -> None:
        indices = sorted(set(indices))
        for i in indices:
            self._check(variant_id, i)
        missing = [i for i in indices if (variant_id, i) not in self._cache]
        if not missing:
            return
        v = self.manifest.variant(variant_id)
        try:
            for i, frame in ffmpeg.decode_frames(self.root / v.file_path, missing, self.output_size(variant_id)):
                self._remember((variant_id, i), frame)
        except ffmpeg.FFmpegError as exc:
            raise DecodeError(variant_id, missing[0], str(exc)) from exc

    def preload_plan(self, plan: Iterable[tuple[str, int]]) -> None:
        by_variant: dict[str, list[int]] = {}
        for vid, i in plan:
            by_variant.setdefault(vid, []).append(i)
        for vid, idx in by_variant.items():
            self.preload(vid, idx)

    def get(self, variant_id: str, frame_index: int) -> np.ndarray:
        key = (variant_id, frame_index)
        with self._lock:
            if key in self._cache:
                self._cache.move_to_end(key)
                return self._cache[key]
            self._check(variant_id, frame_index)
            v = self.manifest.variant(variant_id)
            try:
                for _, frame in ffmpeg.decode_frames(self.root / v.file_path, [frame_index], self.output_size(variant_id)):
                    self._remember(key, frame)
                    return frame
            except ffmpeg.FFmpegError as exc:
                raise DecodeError(variant_id, frame_index, str(exc)) from exc
            raise DecodeError(variant_id, frame_index, "decoder returned no frame")


class ArrayFrameStore:
    """In-memory frames keyed by ``(variant_id, frame_index)``; used for synthetic data."""

    def __init__(self, frames: Mapping[tuple[str, int], np.ndarray]):
        self.frames = dict(frames)

    def preload_plan(self, plan) -> None:
        pass

    def get(self, variant_id: str, frame_index: int) -> np.ndarray:
        try:
            return self.frames[(variant_id, frame_index)]
        except KeyError:
            raise DecodeError(variant_id, frame_index, "frame not available") from None


def decode_frame(manifest: DatasetManifest, root: str | os.PathLike, ref: FrameRef,
                 decode_at_display_resolution: bool | None = None) -> np.ndarray:
    """Decode a single frame (H x W x 3 uint8 RGB)."""
    store = VideoFrameStore(manifest, root, decode_at_display_resolution=decode_at_display_resolution)
    return store.get(ref.variant_id, ref.frame_index)
