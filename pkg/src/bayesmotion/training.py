"""Heteroscedastic NLL training with exact BPTT and Adam with decoupled weight decay."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .data import MotionSequence, NormalizationStats, WindowPair, fit_normalization, ms_to_frame
from .evaluation import mpjpe
from .model import (
    SIGMA2_FLOOR,
    WEIGHT_NAMES,
    BatchMasks,
    DropoutMaskSet,
    ModelParams,
    ProbabilisticPrediction,
    forward,
    init_params,
)

log = logging.getLogger(__name__)

GRAD_CHECK_MAX_PARAMS = 20_000
INIT_VAR_FLOOR = 1e-6  # (1 mm)^2; keeps static data from starting at the variance clamp


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    learning_rate: float = 0.0005
    weight_decay: float = 0.0001
    batch_size: int = 16
    dropout_rate: float = 0.5
    epochs: int = 50
    rng_seed: int = 0
    t_p: int = 50
    t_f: int = 50
    hidden: int = 64
    clip_norm: float = 5.0
    stride: int = 5
    mc_train_seed_policy: str = "fresh"

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must lie in [0, 1)")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.mc_train_seed_policy != "fresh":
            raise ValueError("only the 'fresh' mask policy (new masks per sample per step) is supported")

    @classmethod
    def from_mapping(cls, values: dict[str, str]) -> "TrainConfig":
        kwargs = {}
        for f in fields(cls):
            if f.name in values:
                kwargs[f.name] = type(f.default)(values[f.name])
        return cls(**kwargs)

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# Loss
# ---------------------------------------------------------------------------


def _as_frames(x) -> np.ndarray:
    return x.frames if isinstance(x, MotionSequence) else np.asarray(x, dtype=np.float64)


def _loss_inputs(pred: ProbabilisticPrediction, truth):
    truth = _as_frames(truth)
    if truth.shape != pred.mean_frames.shape:
        raise ValueError(f"truth shape {truth.shape} does not match prediction {pred.mean_frames.shape}")
    sq = np.sum((truth - pred.mean_frames) ** 2, axis=-1)  # (T_f, J)
    var = np.maximum(pred.sigma**2, SIGMA2_FLOOR)
    return sq, var


def weighted_mse_term(pred: ProbabilisticPrediction, truth) -> float:
    sq, var = _loss_inputs(pred, truth)
    return float(np.mean(sq / (2.0 * var)))


def log_variance_term(pred: ProbabilisticPrediction, truth) -> float:
    _, var = _loss_inputs(pred, truth)
    return float(np.mean(0.5 * np.log(var)))


def hetero_nll_loss(pred: ProbabilisticPrediction, truth) -> float:
    """Mean over frames and joints of ``|x - x_hat|^2 / (2 s^2) + log(s^2) / 2``."""
    sq, var = _loss_inputs(pred, truth)
    return float(np.mean(sq / (2.0 * var) + 0.5 * np.log(var)))


# ---------------------------------------------------------------------------
# Backpropagation through time
# ---------------------------------------------------------------------------


def _gru_backward(W, U, dh_new, step, m, gW, gU, gb):
    x, h, hm, z, r, rh, n = step
    H = U.shape[0]
    dz = dh_new * (n - h)
    dn = dh_new * z
    dh = dh_new * (1.0 - z)
    dan = dn * (1.0 - n * n)
    drh = dan @ U[:, 2 * H :].T
    gU[:, 2 * H :] += rh.T @ dan
    dr = drh * hm
    dhm = drh * r
    dzr = np.concatenate([dz * z * (1.0 - z), dr * r * (1.0 - r)], axis=1)
    da = np.concatenate([dzr, dan], axis=1)
    gW += x.T @ da
    gb += da.sum(axis=0)
    gU[:, : 2 * H] += hm.T @ dzr
    dhm += dzr @ U[:, : 2 * H].T
    dh += dhm * m
    return dh, da @ W.T


def _step_losses(res, future):
    """Per-sample, per-step loss contributions ``(B, T_f)`` averaged over joints."""
    B, T, D = future.shape
    J = D // 3
    resid = (res.positions - future).reshape(B, T, J, 3)
    with np.errstate(over="ignore", invalid="ignore"):
        sq = np.sum(resid * resid, axis=-1)
        var = res.sigma2
        per_step = np.mean(sq / (2.0 * var) + 0.5 * np.log(var), axis=-1)
    return per_step, resid, sq, var


def batch_loss(params: ModelParams, observed: np.ndarray, future: np.ndarray, masks: BatchMasks) -> float:
    res = forward(params, observed, future.shape[1], masks)
    per_step, *_ = _step_losses(res, future)
    return float(per_step.mean())


def batch_loss_and_grads(params: ModelParams, observed: np.ndarray, future: np.ndarray, masks: BatchMasks):
    """Mean loss over the batch and its exact gradient w.r.t. every weight tensor.

    ``observed`` is ``(B, T_p, 3J)`` and ``future`` is ``(B, T_f, 3J)``, both in meters.
    Dropout masks are constants of the computation.
    """
    B, T, D = future.shape
    J, H = params.n_joints, params.hidden
    w = params.weights
    scale = params.stats.scale.ravel()
    res = forward(params, observed, T, masks, keep_cache=True)
    per_step, resid, sq, var = _step_losses(res, future)
    bad = ~np.isfinite(per_step)
    if bad.any():
        b, t = np.argwhere(bad)[0]
        raise TrainingDiverged(f"non-finite loss at decoder step {t} (batch sample {b})")
    loss = float(per_step.mean())

    norm = 1.0 / (B * T * J)
    d_pos = (resid / var[..., None]).reshape(B, T, D) * norm
    unclamped = np.exp(res.log_var) >= SIGMA2_FLOOR
    d_lv = (0.5 - sq / (2.0 * var)) * norm * unclamped

    g = {name: np.zeros_like(w[name]) for name in WEIGHT_NAMES}
    cache = res.cache
    dP = np.zeros_like(cache["P"])
    dP[:, 3:] = d_pos
    m_feat, m_dec = masks.input_feat, masks.hidden_dec
    dh = np.zeros((B, H))
    for k in range(T - 1, -1, -1):
        dpk = dP[:, k + 3]
        dP[:, k + 2] += dpk
        dout = np.concatenate([dpk * scale, d_lv[:, k]], axis=1)
        g["out_W"] += cache["head_in"][k].T @ dout
        g["out_b"] += dout.sum(axis=0)
        dh += (dout @ w["out_W"].T) * m_dec
        dh, dx = _gru_backward(w["dec_W"], w["dec_U"], dh, cache["dec"][k], m_dec, g["dec_W"], g["dec_U"], g["dec_b"])
        df = dx * m_feat
        dxp, dv, da = df[:, :D] / scale, df[:, D : 2 * D] / scale, df[:, 2 * D :] / scale
        dP[:, k + 2] += dxp + dv + da
        dP[:, k + 1] -= dv + 2.0 * da
        dP[:, k] += da
    m_enc = masks.hidden_enc
    for step in reversed(cache["enc"]):
        dh, _ = _gru_backward(w["enc_W"], w["enc_U"], dh, step, m_enc, g["enc_W"], g["enc_U"], g["enc_b"])
    return loss, g


def _window_arrays(windows: list[WindowPair]):
    obs = np.stack([w.observed.flat() for w in windows])
    fut = np.stack([w.future.flat() for w in windows])
    return obs, fut


def loss_gradients(params: ModelParams, masks: DropoutMaskSet, window: WindowPair) -> dict[str, np.ndarray]:
    """Gradient of the single-window loss for fixed dropout masks."""
    obs, fut = _window_arrays([window])
    _, grads = batch_loss_and_grads(params, obs, fut, BatchMasks.stack([masks]))
    return grads


def window_loss(params: ModelParams, masks: DropoutMaskSet, window: WindowPair) -> float:
    obs, fut = _window_arrays([window])
    return batch_loss(params, obs, fut, BatchMasks.stack([masks]))


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> tuple[dict[str, np.ndarray], float]:
    total = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if max_norm > 0 and total > max_norm:
        factor = max_norm / total
        return {k: v * factor for k, v in grads.items()}, total
    return grads, total


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: ModelParams) -> "OptimizerState":
        return cls(
            {k: np.zeros_like(a) for k, a in params.weights.items()},
            {k: np.zeros_like(a) for k, a in params.weights.items()},
        )


def adam_step(params: ModelParams, state: OptimizerState, grads: dict[str, np.ndarray], config: TrainConfig):
    """Bias-corrected Adam update followed by multiplicative decay ``1 - lr * weight_decay``."""
    step = state.step + 1
    b1, b2 = state.beta1, state.beta2
    lr = config.learning_rate
    shrink = 1.0 - lr * config.weight_decay
    new_w, new_m, new_v = {}, {}, {}
    for name, p in params.weights.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, expected {p.shape}")
        m = b1 * state.m[name] + (1.0 - b1) * g
        v = b2 * state.v[name] + (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1**step)
        v_hat = v / (1.0 - b2**step)
        new_w[name] = (p - lr * m_hat / (np.sqrt(v_hat) + state.eps)) * shrink
        new_m[name], new_v[name] = m, v
    new_state = OptimizerState(new_m, new_v, step, b1, b2, state.eps)
    return params.with_weights(new_w), new_state


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    params: ModelParams
    curve: list[dict] = field(default_factory=list)
    best_epoch: int = 0


def _fixed_masks(params: ModelParams, n: int, seed) -> BatchMasks:
    rng = np.random.default_rng(seed)
    return BatchMasks.stack(
        [DropoutMaskSet.sample(rng, params.n_joints, params.hidden, params.dropout) for _ in range(n)]
    )


def _evaluate(params, obs, fut, masks, frame_400, chunk=256):
    """Loss and MPJPE at the 400 ms milestone under fixed masks."""
    total, err = 0.0, 0.0
    n = obs.shape[0]
    J = params.n_joints
    for s in range(0, n, chunk):
        sl = slice(s, s + chunk)
        part = BatchMasks(masks.input_feat[sl], masks.hidden_enc[sl], masks.hidden_dec[sl])
        res = forward(params, obs[sl], fut.shape[1], part)
        per_step, *_ = _step_losses(res, fut[sl])
        total += float(per_step.mean(axis=1).sum())
        b = res.positions.shape[0]
        err += sum(
            mpjpe(res.positions[i].reshape(-1, J, 3), fut[sl][i].reshape(-1, J, 3), frame_400) for i in range(b)
        )
    return total / n, err / n


def initial_log_var(windows: list[WindowPair]) -> float:
    """Log of the mean squared zero-velocity residual per joint: a data-scaled starting variance."""
    sq = [np.sum((w.future.frames - w.observed.frames[-1]) ** 2, axis=-1).mean() for w in windows]
    return float(np.log(max(np.mean(sq), INIT_VAR_FLOOR)))


def train(
    config: TrainConfig,
    train_set: list[WindowPair],
    val_set: list[WindowPair],
    stats: NormalizationStats | None = None,
    params: ModelParams | None = None,
) -> TrainResult:
    """Mini-batch training; returns the parameters with the best validation loss.

    Every row of the returned curve has ``epoch, train_loss, val_loss, val_mpjpe_400ms``;
    epoch 0 is the untrained model.
    """
    if not train_set:
        raise ValueError("training set is empty")
    J = train_set[0].observed.n_joints
    rate = train_set[0].observed.frame_rate_hz
    t_p, t_f = len(train_set[0].observed), len(train_set[0].future)
    if stats is None:
        stats = fit_normalization([w.observed for w in train_set] + [w.future for w in train_set])
    if params is None:
        params = init_params(
            J, config.hidden, config.dropout_rate, stats, seed=config.rng_seed,
            init_log_var=initial_log_var(train_set), t_p=t_p, t_f=t_f,
        )

    rng = np.random.default_rng([config.rng_seed, 0])
    frame_400 = max(1, min(t_f, ms_to_frame(400, rate)))
    tr_obs, tr_fut = _window_arrays(train_set)
    eval_sets = {"train": (tr_obs, tr_fut, _fixed_masks(params, len(train_set), [config.rng_seed, 2]))}
    if val_set:
        v_obs, v_fut = _window_arrays(val_set)
        eval_sets["val"] = (v_obs, v_fut, _fixed_masks(params, len(val_set), [config.rng_seed, 1]))
    monitor = "val" if val_set else "train"

    state = OptimizerState.zeros_like(params)
    curve = []

    def record(epoch, train_loss):
        row = {"epoch": epoch, "train_loss": train_loss, "val_loss": float("nan"), "val_mpjpe_400ms": float("nan")}
        if val_set:
            row["val_loss"], row["val_mpjpe_400ms"] = _evaluate(params, *eval_sets["val"], frame_400)
        curve.append(row)
        return row

    init_train, _ = _evaluate(params, *eval_sets["train"], frame_400)
    row = record(0, init_train)
    best_key = row["val_loss"] if val_set else row["train_loss"]
    best, best_epoch = params, 0

    n = len(train_set)
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(n)
        losses = []
        for step, start in enumerate(range(0, n, config.batch_size)):
            idx = order[start : start + config.batch_size]
            masks = BatchMasks.stack(
                [DropoutMaskSet.sample(rng, J, params.hidden, params.dropout) for _ in idx]
            )
            try:
                loss, grads = batch_loss_and_grads(params, tr_obs[idx], tr_fut[idx], masks)
            except TrainingDiverged as exc:
                raise TrainingDiverged(f"epoch {epoch} step {step}: {exc}") from None
            grads, _ = clip_global_norm(grads, config.clip_norm)
            params, state = adam_step(params, state, grads, config)
            losses.append(loss)
        row = record(epoch, float(np.mean(losses)))
        key = row["val_loss"] if val_set else row["train_loss"]
        if not math.isfinite(key):
            raise TrainingDiverged(f"epoch {epoch}: non-finite {monitor} loss")
        log.info("epoch %d train %.4f val %.4f mpjpe400 %.4f", epoch, row["train_loss"], row["val_loss"], row["val_mpjpe_400ms"])
        if key < best_key:
            best_key, best, best_epoch = key, params, epoch
    return TrainResult(best, curve, best_epoch)


def format_curve_csv(curve: list[dict]) -> str:
    lines = ["epoch,train_loss,val_loss,val_mpjpe_400ms"]
    for r in curve:
        lines.append(f"{r['epoch']},{r['train_loss']!r},{r['val_loss']!r},{r['val_mpjpe_400ms']!r}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst_param: str
    per_tensor: dict[str, float]


def tensor_relative_error(analytic, numeric) -> float:
    """Largest absolute disagreement, relative to the tensor's gradient magnitude.

    Entry-wise ratios are dominated by finite-difference round-off on entries that are
    themselves ~1e-7, so the comparison is scaled per tensor.
    """
    analytic, numeric = np.asarray(analytic), np.asarray(numeric)
    denom = max(float(np.max(np.abs(analytic))), float(np.max(np.abs(numeric))), 1e-8)
    return float(np.max(np.abs(analytic - numeric))) / denom


def grad_check(params: ModelParams, window: WindowPair, epsilon: float = 1e-5, masks: DropoutMaskSet | None = None, grads: dict | None = None) -> GradCheckReport:
    """Compare analytic gradients (or the supplied ``grads``) with central differences."""
    if not epsilon > 0:
        raise ValueError("epsilon must be positive")
    if params.n_params > GRAD_CHECK_MAX_PARAMS:
        raise ValueError(
            f"model has {params.n_params} parameters; grad_check perturbs each one, "
            f"use a model with at most {GRAD_CHECK_MAX_PARAMS}"
        )
    if masks is None:
        masks = DropoutMaskSet.all_keep(params.n_joints, params.hidden)
    if grads is None:
        grads = loss_gradients(params, masks, window)
    obs, fut = _window_arrays([window])
    bm = BatchMasks.stack([masks])
    work = params.copy()
    worst, worst_name = -1.0, ""
    per_tensor = {}
    for name in WEIGHT_NAMES:
        arr = work.weights[name]
        numeric = np.empty_like(arr)
        for idx in np.ndindex(arr.shape):
            orig = arr[idx]
            arr[idx] = orig + epsilon
            up = batch_loss(work, obs, fut, bm)
            arr[idx] = orig - epsilon
            down = batch_loss(work, obs, fut, bm)
            arr[idx] = orig
            numeric[idx] = (up - down) / (2.0 * epsilon)
        rel = tensor_relative_error(grads[name], numeric)
        per_tensor[name] = rel
        if rel > worst:
            worst = rel
            pos = np.unravel_index(int(np.argmax(np.abs(grads[name] - numeric))), numeric.shape)
            worst_name = f"{name}[{','.join(str(int(i)) for i in pos)}]"
    return GradCheckReport(worst, worst_name, per_tensor)
