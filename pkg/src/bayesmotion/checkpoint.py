"""Versioned ``.npz`` checkpoints and the content hash used to bind calibrations."""

from __future__ import annotations

import hashlib
import io
import json
import os

import numpy as np

from .data import NormalizationStats
from .model import WEIGHT_NAMES, ModelParams

FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def _meta(params: ModelParams, extra: dict | None) -> dict:
    meta = {
        "format": "bayesmotion-checkpoint",
        "version": FORMAT_VERSION,
        "n_joints": params.n_joints,
        "hidden": params.hidden,
        "dropout": params.dropout,
        "t_p": params.t_p,
        "t_f": params.t_f,
        "dims": {name: list(params.weights[name].shape) for name in WEIGHT_NAMES},
    }
    if extra:
        meta["extra"] = extra
    return meta


def checkpoint_bytes(params: ModelParams, extra: dict | None = None) -> bytes:
    arrays = {name: params.weights[name] for name in WEIGHT_NAMES}
    arrays["stats_mean"] = params.stats.mean
    arrays["stats_scale"] = params.stats.scale
    meta = json.dumps(_meta(params, extra), sort_keys=True).encode()
    arrays["meta"] = np.frombuffer(meta, dtype=np.uint8)
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    return buf.getvalue()


def save_checkpoint(params: ModelParams, path: str | os.PathLike, extra: dict | None = None) -> None:
    from .io import atomic_write_bytes

    atomic_write_bytes(path, checkpoint_bytes(params, extra))


def load_checkpoint(path: str | os.PathLike) -> tuple[ModelParams, dict]:
    """Returns the parameters and any ``extra`` metadata stored with them."""
    try:
        with np.load(path, allow_pickle=False) as z:
            data = {k: z[k] for k in z.files}
    except (OSError, ValueError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None
    if "meta" not in data:
        raise CheckpointError(f"{path} is not a bayesmotion checkpoint")
    meta = json.loads(data["meta"].tobytes().decode())
    if meta.get("format") != "bayesmotion-checkpoint" or meta.get("version") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint format {meta.get('format')} v{meta.get('version')}")
    weights = {name: data[name] for name in WEIGHT_NAMES}
    for name, dims in meta["dims"].items():
        if list(weights[name].shape) != dims:
            raise CheckpointError(f"{path}: tensor {name} has shape {weights[name].shape}, header says {dims}")
    stats = NormalizationStats(data["stats_mean"], data["stats_scale"])
    params = ModelParams(
        weights, meta["n_joints"], meta["hidden"], meta["dropout"], stats, meta["t_p"], meta["t_f"]
    )
    return params, meta.get("extra", {})


def model_hash(params: ModelParams) -> str:
    """SHA-256 over the weights, statistics and architecture; independent of file metadata."""
    h = hashlib.sha256()
    h.update(f"{params.n_joints},{params.hidden},{params.dropout!r}".encode())
    for name in WEIGHT_NAMES:
        h.update(name.encode())
        h.update(np.ascontiguousarray(params.weights[name], dtype="<f8").tobytes())
    h.update(np.ascontiguousarray(params.stats.mean, dtype="<f8").tobytes())
    h.update(np.ascontiguousarray(params.stats.scale, dtype="<f8").tobytes())
    return h.hexdigest()
