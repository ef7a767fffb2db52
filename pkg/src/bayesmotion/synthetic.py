"""Deterministic synthetic skeletons standing in for Human3.6m actions.

Family ``A`` is a walking-in-place gait (seen during training); family ``B`` is a
slow sit-down / stand-up cycle with forward trunk lean (never seen). Both use the
17-joint Human3.6m ordering below, x forward, y left, z up, in meters.
"""

from __future__ import annotations

import numpy as np

from .data import DEFAULT_RATE_HZ, MotionSequence

JOINT_NAMES = (
    "pelvis", "r_hip", "r_knee", "r_ankle", "l_hip", "l_knee", "l_ankle",
    "spine", "thorax", "neck", "head",
    "l_shoulder", "l_elbow", "l_wrist", "r_shoulder", "r_elbow", "r_wrist",
)

FAMILIES = ("A", "B")

_THIGH, _SHIN = 0.43, 0.42
_UPPER_ARM, _FOREARM = 0.27, 0.25
_HIP_W, _SHOULDER_W = 0.12, 0.18
_PELVIS_Z = 0.95
_SPINE = (0.23, 0.24, 0.10, 0.13)  # pelvis->spine->thorax->neck->head
_NOISE_M = 0.002


def _limb(root, angle, length):
    """Endpoint of a segment hanging from ``root`` swung forward by ``angle`` (radians)."""
    return np.stack(
        [root[:, 0] + length * np.sin(angle), root[:, 1], root[:, 2] - length * np.cos(angle)], axis=1
    )


def _trunk(root, lean, length):
    return np.stack(
        [root[:, 0] + length * np.sin(lean), root[:, 1], root[:, 2] + length * np.cos(lean)], axis=1
    )


def _assemble(pelvis, lean, r_thigh, r_knee, l_thigh, l_knee, l_arm, l_elbow, r_arm, r_elbow, size):
    n = pelvis.shape[0]
    out = np.empty((n, 17, 3))
    out[:, 0] = pelvis
    for hip_idx, sign, thigh, knee in ((1, -1.0, r_thigh, r_knee), (4, 1.0, l_thigh, l_knee)):
        hip = pelvis + np.array([0.0, sign * _HIP_W * size, -0.02 * size])
        out[:, hip_idx] = hip
        out[:, hip_idx + 1] = _limb(hip, thigh, _THIGH * size)
        out[:, hip_idx + 2] = _limb(out[:, hip_idx + 1], thigh - knee, _SHIN * size)
    prev = pelvis
    for k, seg in enumerate(_SPINE):
        prev = _trunk(prev, lean, seg * size)
        out[:, 7 + k] = prev
    thorax = out[:, 8]
    for sh_idx, sign, arm, elbow in ((11, 1.0, l_arm, l_elbow), (14, -1.0, r_arm, r_elbow)):
        shoulder = thorax + np.array([0.0, sign * _SHOULDER_W * size, 0.0])
        out[:, sh_idx] = shoulder
        out[:, sh_idx + 1] = _limb(shoulder, arm, _UPPER_ARM * size)
        out[:, sh_idx + 2] = _limb(out[:, sh_idx + 1], arm + elbow, _FOREARM * size)
    return out


def _walking(rng, t):
    freq = rng.uniform(0.9, 1.1)
    phase = rng.uniform(0.0, 2 * np.pi)
    jit = rng.uniform(0.85, 1.15, size=4)
    size = rng.uniform(0.95, 1.05)
    theta = 2 * np.pi * freq * t + phase
    n = t.shape[0]

    leg = 0.45 * jit[0] * np.sin(theta)
    knee_r = 0.6 * jit[1] * np.clip(np.sin(theta + 0.5 * np.pi), 0.0, None)
    knee_l = 0.6 * jit[1] * np.clip(np.sin(theta - 0.5 * np.pi), 0.0, None)
    arm = 0.35 * jit[2] * np.sin(theta)
    elbow = 0.3 + 0.15 * jit[3] * np.sin(theta)
    bob = 0.02 * np.cos(2 * theta)
    pelvis = np.stack([np.zeros(n), np.zeros(n), _PELVIS_Z * size + bob], axis=1)
    lean = np.full(n, 0.05)
    return _assemble(pelvis, lean, leg, knee_r, -leg, knee_l, leg, elbow, -arm, elbow, size)


def _sitting(rng, t):
    freq = rng.uniform(0.25, 0.35)
    phase = rng.uniform(0.0, 2 * np.pi)
    jit = rng.uniform(0.85, 1.15, size=4)
    size = rng.uniform(0.95, 1.05)
    depth = 0.5 * (1.0 - np.cos(2 * np.pi * freq * t + phase))  # 0 standing, 1 seated
    n = t.shape[0]

    thigh = 1.4 * jit[0] * depth
    knee = 1.5 * jit[1] * depth
    pelvis = np.stack(
        [-0.25 * jit[2] * depth, np.zeros(n), _PELVIS_Z * size - 0.42 * depth], axis=1
    )
    lean = 0.05 + 0.55 * jit[3] * depth
    arm = 0.9 * depth
    elbow = 0.2 + 0.6 * depth
    # seated legs: thigh forward, shin back towards vertical
    return _assemble(pelvis, lean, thigh, knee, thigh, knee, arm, elbow, arm, elbow, size)


def synth_generate(family: str, seed: int, n_frames: int, frame_rate_hz: float = DEFAULT_RATE_HZ) -> MotionSequence:
    """Generate ``n_frames`` of family ``A`` or ``B``; a pure function of its arguments."""
    if family not in FAMILIES:
        raise ValueError(f"unknown family {family!r}; expected one of {FAMILIES}")
    if n_frames < 1:
        raise ValueError("n_frames must be at least 1")
    rng = np.random.default_rng([int(seed), FAMILIES.index(family)])
    t = np.arange(n_frames) / frame_rate_hz
    frames = _walking(rng, t) if family == "A" else _sitting(rng, t)
    frames = frames + rng.normal(0.0, _NOISE_M, size=frames.shape)
    label = "walking" if family == "A" else "sittingdown"
    return MotionSequence(frames, frame_rate_hz, label)
