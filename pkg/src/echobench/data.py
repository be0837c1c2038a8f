"""Synthetic pulsating-chamber clips with known ejection-fraction labels.

Each clip shows a bright filled ellipse on a dark speckle background whose
area oscillates between an end-diastolic maximum and an end-systolic minimum.
The label is the 2-D analogue of EF, ``100 * (A_max - A_min) / A_max``.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

MAGIC = b"ECHOCLP1"
HEADER_BYTES = 24  # five uint32 extents padded with zeros
PREFIX_BYTES = len(MAGIC) + HEADER_BYTES
SUPERSAMPLE = 4
CHAMBER_INTENSITY = 0.8
ASPECT = 1.3  # long-axis / short-axis ratio of the chamber


@dataclass
class VideoClip:
    frames: np.ndarray
    label: float

    def __post_init__(self):
        self.frames = np.ascontiguousarray(self.frames, dtype=np.float32)
        if self.frames.ndim != 4 or min(self.frames.shape) < 1:
            raise ValueError(f"clip frames must be T x H x W x C, got {self.frames.shape}")
        self.label = float(np.float32(self.label))
        if not 0.0 <= self.label <= 100.0:
            raise ValueError(f"EF label must lie in [0, 100], got {self.label}")

    @property
    def shape(self):
        return self.frames.shape


@dataclass(frozen=True)
class VolumePair:
    edv: float
    esv: float


def ef_from_volumes(v: VolumePair) -> float:
    """Ejection fraction in percent: stroke volume over end-diastolic volume."""
    if v.edv <= 0:
        raise ValueError(f"end-diastolic volume must be positive, got {v.edv}")
    if not 0 <= v.esv <= v.edv:
        raise ValueError(f"end-systolic volume must lie in [0, EDV], got {v.esv} with EDV {v.edv}")
    # 1 - ESV/EDV stays inside [0, 1] under rounding, unlike (EDV - ESV) / EDV
    return 100.0 * (1.0 - v.esv / v.edv)


@dataclass(frozen=True)
class SyntheticParams:
    target_ef: float = 60.0
    base_radius: float = 0.25
    cycle_period: int = 20
    noise_std: float = 0.0
    center_jitter: float = 0.0
    seed: int = 0
    frames: int = 28
    height: int = 112
    width: int = 112
    phase: float = 0.0

    def validate(self):
        if not 0.0 <= self.target_ef <= 90.0:
            raise ValueError(f"target_ef must lie in [0, 90], got {self.target_ef}")
        if self.base_radius <= 0 or self.cycle_period < 2 or self.noise_std < 0 or self.center_jitter < 0:
            raise ValueError("base_radius > 0, cycle_period >= 2, noise_std >= 0, center_jitter >= 0 required")
        if self.frames < 1 or self.height < 1 or self.width < 1:
            raise ValueError("clip extents must be positive")


def area_scale(t: np.ndarray, target_ef: float, period: int, phase: float = 0.0) -> np.ndarray:
    """Chamber area relative to end-diastole: 1 at t=phase, 1 - EF/100 half a period later."""
    return 1.0 - (target_ef / 100.0) * 0.5 * (1.0 - np.cos(2.0 * np.pi * (t - phase) / period))


def _ellipse_coverage(height: int, width: int, cy: float, cx: float, ry: np.ndarray,
                      rx: np.ndarray) -> np.ndarray:
    """Fraction of each pixel inside the ellipse, estimated on a SUPERSAMPLE^2 grid. Shape F x H x W."""
    s = SUPERSAMPLE
    sub = (np.arange(s) + 0.5) / s
    ys = (np.arange(height)[:, None] + sub[None, :]).reshape(-1) - cy
    xs = (np.arange(width)[:, None] + sub[None, :]).reshape(-1) - cx
    ry = np.asarray(ry, dtype=np.float64)[:, None, None]
    rx = np.asarray(rx, dtype=np.float64)[:, None, None]
    inside = (ys[None, :, None] / ry) ** 2 + (xs[None, None, :] / rx) ** 2 <= 1.0
    return inside.reshape(-1, height, s, width, s).mean(axis=(2, 4))


def generate_synthetic_clip(params: SyntheticParams) -> VideoClip:
    """Render a deterministic clip (PCG64 stream seeded by ``params.seed``)."""
    params.validate()
    rng = np.random.Generator(np.random.PCG64(params.seed))
    T, H, W = params.frames, params.height, params.width
    rx0 = params.base_radius * min(H, W)
    ry0 = ASPECT * rx0
    jy, jx = (rng.uniform(-params.center_jitter, params.center_jitter, size=2)
              if params.center_jitter > 0 else (0.0, 0.0))
    cy, cx = H / 2.0 + jy, W / 2.0 + jx
    if cy - ry0 < 0 or cy + ry0 > H or cx - rx0 < 0 or cx + rx0 > W:
        raise ValueError(f"chamber (radii {ry0:.1f} x {rx0:.1f} at {cy:.1f},{cx:.1f}) exceeds the {H}x{W} frame")
    # area scales with the square of the linear size
    lin = np.sqrt(area_scale(np.arange(T), params.target_ef, params.cycle_period, params.phase))
    frames = CHAMBER_INTENSITY * _ellipse_coverage(H, W, cy, cx, ry0 * lin, rx0 * lin)
    if params.noise_std > 0:
        frames = frames + params.noise_std * rng.random((T, H, W))
    frames = np.clip(frames, 0.0, 1.0)
    return VideoClip(frames[..., None], params.target_ef)


def chamber_areas(frames: np.ndarray) -> np.ndarray:
    """Pixel-count area per frame: pixels brighter than half the chamber intensity."""
    frames = np.asarray(frames)
    return (frames[..., 0] > CHAMBER_INTENSITY / 2).reshape(frames.shape[0], -1).sum(axis=1).astype(float)


def estimate_ef_from_pixels(frames: np.ndarray) -> float:
    areas = chamber_areas(frames)
    return 100.0 * (areas.max() - areas.min()) / areas.max()


def frame_difference(clip: np.ndarray, axis: int = 0) -> np.ndarray:
    """Consecutive differences ``f[t+1] - f[t]`` along the time axis (T -> T-1)."""
    clip = np.asarray(clip)
    if clip.shape[axis] < 2:
        raise ValueError(f"frame differencing needs at least 2 frames, got {clip.shape[axis]}")
    return np.diff(clip, axis=axis)


def triplicate_grayscale(clip: np.ndarray) -> np.ndarray:
    """Repeat a single grayscale channel into three identical channels."""
    clip = np.asarray(clip)
    if clip.shape[-1] != 1:
        raise ValueError(f"expected one channel, got {clip.shape[-1]}")
    return np.repeat(clip, 3, axis=-1)


@dataclass
class DatasetSplit:
    train: list[int]
    val: list[int]
    test: list[int]
    seed: int
    ratios: tuple[float, float, float]


def split_dataset(n: int, ratios: Sequence[float] = (0.744, 0.128, 0.128), seed: int = 0) -> DatasetSplit:
    """Seeded permutation; floor(ratio * n) for train and val, remainder to test."""
    if n < 3:
        raise ValueError(f"need at least 3 items to split, got {n}")
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or min(ratios) <= 0 or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must be three positive values summing to 1, got {ratios}")
    perm = np.random.Generator(np.random.PCG64(seed)).permutation(n)
    # tolerance absorbs representation error such as 0.744 * 1000 = 743.999...
    n_train = int(math.floor(ratios[0] * n + 1e-9))
    n_val = int(math.floor(ratios[1] * n + 1e-9))
    return DatasetSplit(perm[:n_train].tolist(), perm[n_train:n_train + n_val].tolist(),
                        perm[n_train + n_val:].tolist(), seed, ratios)


@dataclass(frozen=True)
class DatasetSpec:
    """Recipe for a synthetic dataset; every clip gets its own derived seed."""
    n: int = 64
    frames: int = 28
    height: int = 112
    width: int = 112
    ef_range: tuple[float, float] = (10.0, 80.0)
    noise_std: float = 0.05
    base_radius: float = 0.25
    radius_jitter: float = 0.0
    center_jitter: float = 0.0
    cycle_period: int = 20
    random_phase: bool = False
    seed: int = 0


def generate_dataset(spec: DatasetSpec) -> list[VideoClip]:
    lo, hi = spec.ef_range
    if not 0 <= lo <= hi <= 90:
        raise ValueError(f"ef_range must lie within [0, 90], got {spec.ef_range}")
    root = np.random.SeedSequence(spec.seed)
    draws = np.random.Generator(np.random.PCG64(root.spawn(1)[0])).random((spec.n, 3))
    clip_seeds = root.spawn(spec.n + 1)[1:]
    clips = []
    for i in range(spec.n):
        u_ef, u_rad, u_phase = draws[i]
        params = SyntheticParams(
            target_ef=lo + (hi - lo) * u_ef,
            base_radius=spec.base_radius * (1.0 + spec.radius_jitter * (2.0 * u_rad - 1.0)),
            cycle_period=spec.cycle_period,
            noise_std=spec.noise_std,
            center_jitter=spec.center_jitter,
            seed=int(clip_seeds[i].generate_state(1, np.uint64)[0]),
            frames=spec.frames, height=spec.height, width=spec.width,
            phase=spec.cycle_period * u_phase if spec.random_phase else 0.0,
        )
        clips.append(generate_synthetic_clip(params))
    return clips


def stack_clips(clips: Sequence[VideoClip]) -> tuple[np.ndarray, np.ndarray]:
    return (np.stack([c.frames for c in clips]), np.array([c.label for c in clips], dtype=np.float64))


# ---------------------------------------------------------------------------
# record files

class RecordFormatError(ValueError):
    pass


def write_records(clips: Sequence[VideoClip], path: str | Path) -> Path:
    """Magic, 24-byte header (n, T, H, W, C as uint32 + zero pad), then float32 pixels + label per clip."""
    clips = list(clips)
    if not clips:
        raise ValueError("no clips to write")
    shape = clips[0].shape
    for i, c in enumerate(clips):
        if c.shape != shape:
            raise ValueError(f"clip {i} has shape {c.shape}, expected {shape}")
    path = Path(path)
    with path.open("wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<5I", len(clips), *shape))
        fh.write(b"\x00" * (HEADER_BYTES - 20))
        for c in clips:
            fh.write(np.ascontiguousarray(c.frames, dtype="<f4").tobytes())
            fh.write(struct.pack("<f", c.label))
    return path


def read_records(path: str | Path) -> list[VideoClip]:
    raw = Path(path).read_bytes()
    if len(raw) < PREFIX_BYTES:
        raise RecordFormatError(f"truncated header at offset {len(raw)} (need {PREFIX_BYTES} bytes)")
    if raw[:8] != MAGIC:
        raise RecordFormatError(f"bad magic {raw[:8]!r} at offset 0")
    n, T, H, W, C = struct.unpack_from("<5I", raw, 8)
    if raw[28:PREFIX_BYTES] != b"\x00" * (PREFIX_BYTES - 28) or min(T, H, W, C) == 0:
        raise RecordFormatError(f"inconsistent shape header at offset 8: n={n} T={T} H={H} W={W} C={C}")
    per_clip = T * H * W * C
    record_bytes = 4 * (per_clip + 1)
    expected = PREFIX_BYTES + n * record_bytes
    if len(raw) != expected:
        where = min(len(raw), expected)
        raise RecordFormatError(f"payload size mismatch at offset {where}: file has {len(raw)} bytes, "
                                f"header implies {expected}")
    clips = []
    for i in range(n):
        off = PREFIX_BYTES + i * record_bytes
        pixels = np.frombuffer(raw, dtype="<f4", count=per_clip, offset=off).reshape(T, H, W, C)
        (label,) = struct.unpack_from("<f", raw, off + 4 * per_clip)
        clips.append(VideoClip(pixels.astype(np.float32), label))
    return clips
