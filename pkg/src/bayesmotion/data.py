"""Skeletal motion sequences: file I/O, windowing, normalization, zero-velocity baseline."""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

DEFAULT_JOINTS = 17
DEFAULT_RATE_HZ = 25.0
MAGIC = "MOTION v1"


class MotionFormatError(ValueError):
    """Raised when a motion file cannot be parsed."""


@dataclass(frozen=True)
class MotionSequence:
    """A timed sequence of poses.

    ``frames`` has shape ``(F, J, 3)``: frame, joint, Cartesian coordinate (meters).
    """

    frames: np.ndarray
    frame_rate_hz: float = DEFAULT_RATE_HZ
    label: str = ""

    def __post_init__(self):
        frames = np.asarray(self.frames, dtype=np.float64)
        if frames.ndim != 3 or frames.shape[2] != 3:
            raise ValueError(f"frames must have shape (F, J, 3), got {frames.shape}")
        if frames.shape[0] == 0:
            raise ValueError("a motion sequence needs at least one frame")
        if not np.all(np.isfinite(frames)):
            raise ValueError("frames contain non-finite coordinates")
        if not self.frame_rate_hz > 0:
            raise ValueError(f"frame_rate_hz must be positive, got {self.frame_rate_hz}")
        object.__setattr__(self, "frames", frames)

    def __len__(self) -> int:
        return self.frames.shape[0]

    @property
    def n_joints(self) -> int:
        return self.frames.shape[1]

    def flat(self) -> np.ndarray:
        """Frames as ``(F, 3J)`` rows in joint-major order (x1 y1 z1 x2 ...)."""
        return self.frames.reshape(len(self), -1)

    def slice(self, start: int, stop: int) -> "MotionSequence":
        return MotionSequence(self.frames[start:stop], self.frame_rate_hz, self.label)


@dataclass(frozen=True)
class WindowPair:
    observed: MotionSequence
    future: MotionSequence
    offset: int = 0


@dataclass(frozen=True)
class NormalizationStats:
    """Per-coordinate offset and scale, both shaped ``(J, 3)``."""

    mean: np.ndarray
    scale: np.ndarray = field(default=None)

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64)
        scale = np.ones_like(mean) if self.scale is None else np.asarray(self.scale, dtype=np.float64)
        if mean.shape != scale.shape or mean.ndim != 2 or mean.shape[1] != 3:
            raise ValueError(f"mean/scale must share shape (J, 3), got {mean.shape} and {scale.shape}")
        if not np.all(scale > 0):
            raise ValueError("normalization scale must be strictly positive")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "scale", scale)

    @property
    def n_joints(self) -> int:
        return self.mean.shape[0]

    @classmethod
    def identity(cls, n_joints: int) -> "NormalizationStats":
        return cls(np.zeros((n_joints, 3)), np.ones((n_joints, 3)))


# ---------------------------------------------------------------------------
# File format
# ---------------------------------------------------------------------------


def _parse_header(line: str) -> dict[str, str]:
    fields = {}
    for token in line.split():
        if "=" not in token:
            raise MotionFormatError(f"line 2: malformed header token {token!r}")
        key, value = token.split("=", 1)
        fields[key] = value
    missing = {"joints", "rate", "frames"} - fields.keys()
    if missing:
        raise MotionFormatError(f"line 2: header missing {sorted(missing)}")
    return fields


def load_motion_file(path: str | os.PathLike) -> MotionSequence:
    """Read a ``MOTION v1`` text file.

    Errors name the 1-based line, frame and joint at fault.
    """
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0].strip() != MAGIC:
        raise MotionFormatError(f"line 1: expected {MAGIC!r}")
    if len(lines) < 2:
        raise MotionFormatError("line 2: missing header")
    header = _parse_header(lines[1])
    try:
        n_joints = int(header["joints"])
        rate = float(header["rate"])
        n_frames = int(header["frames"])
    except ValueError as exc:
        raise MotionFormatError(f"line 2: {exc}") from None
    if n_joints < 1 or n_frames < 1 or not (rate > 0 and math.isfinite(rate)):
        raise MotionFormatError("line 2: joints, rate and frames must be positive")

    body = [ln for ln in lines[2:] if ln.strip()]
    if len(body) != n_frames:
        raise MotionFormatError(f"header declares {n_frames} frames but file has {len(body)}")

    frames = np.empty((n_frames, n_joints, 3))
    for i, text in enumerate(body):
        lineno = i + 3
        tokens = text.split()
        if len(tokens) != 3 * n_joints:
            raise MotionFormatError(
                f"line {lineno}: frame {i + 1} has {len(tokens) / 3:g} joints, expected {n_joints}"
            )
        try:
            values = np.array([float(t) for t in tokens])
        except ValueError as exc:
            raise MotionFormatError(f"line {lineno}: frame {i + 1}: {exc}") from None
        bad = np.flatnonzero(~np.isfinite(values))
        if bad.size:
            k = int(bad[0])
            raise MotionFormatError(
                f"line {lineno}: frame {i + 1} joint {k // 3 + 1} coordinate {'xyz'[k % 3]} is non-finite"
            )
        frames[i] = values.reshape(n_joints, 3)
    label = header.get("label", "")
    return MotionSequence(frames, rate, "" if label == "-" else label)


def format_motion(seq: MotionSequence) -> str:
    label = seq.label.replace(" ", "_") or "-"
    out = [MAGIC, f"joints={seq.n_joints} rate={seq.frame_rate_hz:g} frames={len(seq)} label={label}"]
    for row in seq.flat():
        out.append(" ".join(repr(float(v)) for v in row))
    return "\n".join(out) + "\n"


def save_motion_file(seq: MotionSequence, path: str | os.PathLike) -> None:
    Path(path).write_text(format_motion(seq), encoding="utf-8")


def load_motion_dir(directory: str | os.PathLike) -> list[MotionSequence]:
    paths = sorted(Path(directory).glob("*.motion"))
    return [load_motion_file(p) for p in paths]


# ---------------------------------------------------------------------------
# Windowing and normalization
# ---------------------------------------------------------------------------


def window_dataset(seq: MotionSequence, t_p: int, t_f: int, stride: int) -> list[WindowPair]:
    """All contiguous (observed, future) pairs at offsets 0, stride, 2*stride, ..."""
    if t_p < 3:
        raise ValueError("t_p must be at least 3 for second-order differences")
    if t_f < 1 or stride < 1:
        raise ValueError("t_f and stride must be at least 1")
    pairs = []
    for start in range(0, len(seq) - t_p - t_f + 1, stride):
        pairs.append(
            WindowPair(seq.slice(start, start + t_p), seq.slice(start + t_p, start + t_p + t_f), start)
        )
    return pairs


def window_many(seqs, t_p: int, t_f: int, stride: int) -> list[WindowPair]:
    return [w for s in seqs for w in window_dataset(s, t_p, t_f, stride)]


def fit_normalization(train: list[MotionSequence]) -> NormalizationStats:
    """Per-coordinate mean and population std over every frame; zero std becomes 1."""
    if not train:
        raise ValueError("cannot fit normalization on an empty training set")
    frames = np.concatenate([s.frames for s in train], axis=0)
    mean = frames.mean(axis=0)
    scale = frames.std(axis=0)
    # constant coordinates leave round-off (~1e-16 * |mean|) rather than an exact zero
    scale[scale <= 1e-12 * (1.0 + np.abs(mean))] = 1.0
    return NormalizationStats(mean, scale)


def _check_stats(seq: MotionSequence, stats: NormalizationStats) -> None:
    if stats.n_joints != seq.n_joints:
        raise ValueError(f"stats cover {stats.n_joints} joints, sequence has {seq.n_joints}")


def normalize(seq: MotionSequence, stats: NormalizationStats) -> MotionSequence:
    _check_stats(seq, stats)
    return MotionSequence((seq.frames - stats.mean) / stats.scale, seq.frame_rate_hz, seq.label)


def denormalize(seq: MotionSequence, stats: NormalizationStats) -> MotionSequence:
    _check_stats(seq, stats)
    return MotionSequence(seq.frames * stats.scale + stats.mean, seq.frame_rate_hz, seq.label)


def zero_velocity_baseline(observed: MotionSequence, t_f: int) -> np.ndarray:
    """``t_f`` copies of the last observed frame, shape ``(t_f, J, 3)``.

    Returned as an array because ``t_f = 0`` is legal and a MotionSequence cannot be empty.
    """
    if t_f < 0:
        raise ValueError("t_f must be non-negative")
    return np.repeat(observed.frames[-1:], t_f, axis=0)


def ms_to_frame(ms: float, frame_rate_hz: float) -> int:
    """Milliseconds to a 1-based frame count, rounding to the nearest frame."""
    return int(math.floor(ms * frame_rate_hz / 1000.0 + 0.5))
