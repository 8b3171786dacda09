"""Thin subprocess wrappers around an ffmpeg binary built with libvmaf.

The executable is taken from ``$CGVQA_FR_TOOL`` when set, otherwise the
static build shipped with ``imageio-ffmpeg``.
"""
from __future__ import annotations

import json
import os
import subprocess
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

ENV_TOOL = "CGVQA_FR_TOOL"


class FFmpegError(RuntimeError):
    def __init__(self, message: str, output: str = ""):
        super().__init__(message + (f"\n{output.strip()}" if output else ""))
        self.output = output


def executable() -> str:
    exe = os.environ.get(ENV_TOOL)
    if exe:
        return exe
    import imageio_ffmpeg

    return imageio_ffmpeg.get_ffmpeg_exe()


def run(args: Sequence[str], *, exe: str | None = None, timeout: float | None = None) -> subprocess.CompletedProcess:
    cmd = [exe or executable(), "-nostdin", "-hide_banner", *args]
    try:
        proc = subprocess.run(cmd, capture_output=True, timeout=timeout)
    except FileNotFoundError as exc:
        raise FFmpegError(f"ffmpeg executable not found: {cmd[0]}") from exc
    if proc.returncode != 0:
        raise FFmpegError(
            f"ffmpeg exited with status {proc.returncode}: {' '.join(cmd)}",
            proc.stderr.decode(errors="replace"),
        )
    return proc


@lru_cache(maxsize=None)
def version(exe: str | None = None) -> str:
    proc = run(["-version"], exe=exe)
    return proc.stdout.decode(errors="replace").splitlines()[0].strip()


@dataclass(frozen=True)
class VideoInfo:
    width: int
    height: int
    fps: float
    codec: str
    duration: float


def probe(path: str | os.PathLike) -> VideoInfo:
    import imageio_ffmpeg

    path = str(path)
    if not Path(path).is_file():
        raise FFmpegError(f"no such file: {path}")
    gen = imageio_ffmpeg.read_frames(path)
    try:
        meta = next(gen)
    except (OSError, RuntimeError, StopIteration) as exc:
        raise FFmpegError(f"cannot probe {path}: {exc}") from exc
    finally:
        gen.close()
    if "size" not in meta:
        raise FFmpegError(f"no video stream in {path}")
    w, h = meta["size"]
    return VideoInfo(int(w), int(h), float(meta.get("fps") or 0.0), str(meta.get("codec", "")), float(meta.get("duration") or 0.0))


def count_frames(path: str | os.PathLike) -> int:
    """Exact number of frames obtained by decoding the whole video stream."""
    proc = run(
        ["-v", "error", "-i", str(path), "-map", "0:v:0", "-fps_mode", "passthrough",
         "-f", "null", "-progress", "pipe:1", "-nostats", "-"]
    )
    frames = None
    for line in proc.stdout.decode(errors="replace").splitlines():
        if line.startswith("frame="):
            frames = int(line.split("=", 1)[1])
    if frames is None:
        raise FFmpegError(f"could not count frames of {path}", proc.stderr.decode(errors="replace"))
    return frames


def _select_expr(indices: Sequence[int]) -> str | None:
    """ffmpeg ``select`` expression keeping exactly ``indices`` (sorted, unique)."""
    if len(indices) == 1:
        return f"eq(n,{indices[0]})"
    steps = {b - a for a, b in zip(indices, indices[1:])}
    if len(steps) == 1:
        (d,) = steps
        first, last = indices[0], indices[-1]
        return f"gte(n,{first})*lte(n,{last})*not(mod(n-{first},{d}))"
    if len(indices) <= 200:
        return "+".join(f"eq(n,{i})" for i in indices)
    return None


def decode_frames(
    path: str | os.PathLike,
    indices: Iterable[int],
    size: tuple[int, int],
    *,
    scale_filter: str = "bicubic",
) -> Iterator[tuple[int, np.ndarray]]:
    """Yield ``(index, rgb)`` for the requested frame indices in increasing order.

    ``size`` is the output (width, height); frames are scaled to it when it
    differs from the coded size.  YUV is converted with the BT.709 matrix.
    """
    wanted = sorted(set(int(i) for i in indices))
    if not wanted:
        return
    width, height = size
    expr = _select_expr(wanted)
    filters = []
    if expr is not None:
        filters.append(f"select='{expr}'")
    filters.append(f"scale={width}:{height}:flags={scale_filter}:in_color_matrix=bt709")
    filters.append("format=rgb24")
    cmd = [executable(), "-nostdin", "-hide_banner", "-v", "error", "-i", str(path), "-map", "0:v:0",
           "-vf", ",".join(filters), "-fps_mode", "passthrough", "-f", "rawvideo", "-pix_fmt", "rgb24", "pipe:1"]
    frame_bytes = width * height * 3
    proc = subprocess.Popen(cmd, stdout=subprocess.PIPE, stderr=subprocess.PIPE)
    try:
        pos = 0
        n = 0
        want_set = set(wanted)
        while pos < len(wanted):
            buf = proc.stdout.read(frame_bytes)
            if len(buf) < frame_bytes:
                break
            # without a select filter every frame arrives and we keep the wanted ones
            index = wanted[pos] if expr is not None else n
            n += 1
            if expr is None and index not in want_set:
                continue
            pos += 1
            yield index, np.frombuffer(buf, np.uint8).reshape(height, width, 3).copy()
    finally:
        proc.stdout.close()
        proc.kill()
        err = proc.stderr.read().decode(errors="replace")
        proc.stderr.close()
        proc.wait()
    if pos < len(wanted):
        raise FFmpegError(f"{path}: decoder stopped before frame {wanted[pos]}", err)


def encode_frames(
    frames: Iterable[np.ndarray],
    path: str | os.PathLike,
    *,
    fps: float = 30.0,
    codec_args: Sequence[str] = ("-c:v", "libx264", "-preset", "veryfast", "-qp", "0"),
    size: tuple[int, int] | None = None,
) -> None:
    """Encode RGB frames (H, W, 3 uint8) to ``path``; optionally rescale to ``size``."""
    it = iter(frames)
    first = next(it)
    h, w = first.shape[:2]
    vf = "scale=out_color_matrix=bt709:out_range=tv"
    if size is not None:
        vf = f"scale={size[0]}:{size[1]}:flags=bicubic:out_color_matrix=bt709:out_range=tv"
    cmd = [executable(), "-nostdin", "-hide_banner", "-v", "error", "-y",
           "-f", "rawvideo", "-pix_fmt", "rgb24", "-s", f"{w}x{h}", "-r", str(fps), "-i", "pipe:0",
           "-vf", vf, "-pix_fmt", "yuv420p", "-colorspace", "bt709", *codec_args, str(path)]
    proc = subprocess.Popen(cmd, stdin=subprocess.PIPE, stderr=subprocess.PIPE)
    try:
        proc.stdin.write(np.ascontiguousarray(first, np.uint8).tobytes())
        for frame in it:
            proc.stdin.write(np.ascontiguousarray(frame, np.uint8).tobytes())
        proc.stdin.close()
    except BrokenPipeError:
        pass
    err = proc.stderr.read().decode(errors="replace")
    if proc.wait() != 0:
        raise FFmpegError(f"encoding {path} failed", err)


def transcode(src: str | os.PathLike, dst: str | os.PathLike, args: Sequence[str]) -> None:
    run(["-v", "error", "-y", "-i", str(src), *args, str(dst)])


def vmaf_per_frame(
    distorted: str | os.PathLike,
    reference: str | os.PathLike,
    size: tuple[int, int],
    log_path: str | os.PathLike,
    *,
    model: str = "version=vmaf_v0.6.1",
    scale_filter: str = "bicubic",
    n_threads: int = 1,
    exe: str | None = None,
    timeout: float | None = None,
) -> dict:
    """Run libvmaf and return its parsed JSON report.

    The distorted stream is scaled to ``size`` (the reference resolution)
    before scoring.
    """
    w, h = size
    graph = (
        f"[0:v]scale={w}:{h}:flags={scale_filter},format=yuv420p,setpts=PTS-STARTPTS[dist];"
        f"[1:v]format=yuv420p,setpts=PTS-STARTPTS[ref];"
        f"[dist][ref]libvmaf=model={model}:log_fmt=json:log_path={log_path}:n_threads={n_threads}"
    )
    run(["-v", "error", "-i", str(distorted), "-i", str(reference), "-lavfi", graph,
         "-fps_mode", "passthrough", "-f", "null", "-"], exe=exe, timeout=timeout)
    try:
        return json.loads(Path(log_path).read_text())
    except (OSError, ValueError) as exc:
        raise FFmpegError(f"unparsable VMAF report {log_path}: {exc}") from exc
