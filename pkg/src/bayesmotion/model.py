"""Bayesian GRU encoder-decoder with MC dropout.

The network consumes ``[x, v, a]`` dynamics features (position, first and second
differences), encodes the observed window into a hidden state, then decodes
closed-loop: each step emits a velocity (added to the previous predicted pose)
and one log-variance per joint.

Dropout follows the variational-recurrent recipe: one Bernoulli mask per joint on
the input features, one per hidden unit on the recurrent state, all sampled once
per stochastic pass and reused at every time step. Hidden masks act on the state
as seen by the weight matrices (gates, candidate, output head); the GRU carry path
``(1 - z) * h`` is left unmasked so the state stays bounded.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .data import MotionSequence, NormalizationStats

WEIGHT_NAMES = ("enc_W", "enc_U", "enc_b", "dec_W", "dec_U", "dec_b", "out_W", "out_b")
SIGMA2_FLOOR = 1e-8
DEFAULT_N_SAMPLES = 30


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


# ---------------------------------------------------------------------------
# Types
# ---------------------------------------------------------------------------


@dataclass
class ModelParams:
    """All learnable weights plus the fixed configuration needed to run them.

    Gate blocks in the ``*_W``/``*_U``/``*_b`` tensors are ordered update, reset, candidate.
    """

    weights: dict[str, np.ndarray]
    n_joints: int
    hidden: int
    dropout: float
    stats: NormalizationStats
    t_p: int = 50
    t_f: int = 50

    def __post_init__(self):
        J, H = self.n_joints, self.hidden
        expected = {
            "enc_W": (9 * J, 3 * H), "enc_U": (H, 3 * H), "enc_b": (3 * H,),
            "dec_W": (9 * J, 3 * H), "dec_U": (H, 3 * H), "dec_b": (3 * H,),
            "out_W": (H, 4 * J), "out_b": (4 * J,),
        }
        if set(self.weights) != set(expected):
            raise ValueError(f"weights must have keys {WEIGHT_NAMES}")
        for name, shape in expected.items():
            w = self.weights[name]
            if w.shape != shape:
                raise ValueError(f"{name} has shape {w.shape}, expected {shape}")
            if not np.all(np.isfinite(w)):
                raise ValueError(f"{name} contains non-finite entries")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        if self.stats.n_joints != J:
            raise ValueError("normalization stats do not match n_joints")

    @property
    def n_params(self) -> int:
        return sum(w.size for w in self.weights.values())

    def copy(self) -> "ModelParams":
        return replace(self, weights={k: v.copy() for k, v in self.weights.items()})

    def with_weights(self, weights: dict[str, np.ndarray]) -> "ModelParams":
        return replace(self, weights=weights)


def init_params(
    n_joints: int,
    hidden: int,
    dropout: float = 0.5,
    stats: NormalizationStats | None = None,
    seed: int = 0,
    init_log_var: float = 0.0,
    t_p: int = 50,
    t_f: int = 50,
) -> ModelParams:
    """Uniform(-1/sqrt(H), 1/sqrt(H)) recurrent weights.

    The velocity half of the output head starts at zero, so an untrained model predicts the
    zero-velocity baseline; the log-variance half starts small and random.
    """
    rng = np.random.default_rng(seed)
    J, H = n_joints, hidden
    k = 1.0 / np.sqrt(H)
    w = {}
    for prefix in ("enc", "dec"):
        w[f"{prefix}_W"] = rng.uniform(-k, k, size=(9 * J, 3 * H))
        w[f"{prefix}_U"] = rng.uniform(-k, k, size=(H, 3 * H))
        w[f"{prefix}_b"] = rng.uniform(-k, k, size=3 * H)
    w["out_W"] = rng.uniform(-0.1 * k, 0.1 * k, size=(H, 4 * J))
    w["out_W"][:, : 3 * J] = 0.0
    w["out_b"] = np.concatenate([np.zeros(3 * J), np.full(J, float(init_log_var))])
    if stats is None:
        stats = NormalizationStats.identity(J)
    return ModelParams(w, J, H, dropout, stats, t_p, t_f)


@dataclass(frozen=True)
class DropoutMaskSet:
    """Scaled keep-masks (0 or 1/(1-p)) for one stochastic forward pass."""

    input_joint: np.ndarray  # (J,)
    hidden_enc: np.ndarray  # (H,)
    hidden_dec: np.ndarray  # (H,)

    @classmethod
    def sample(cls, rng: np.random.Generator, n_joints: int, hidden: int, p: float) -> "DropoutMaskSet":
        if p == 0.0:
            return cls.all_keep(n_joints, hidden)
        keep = 1.0 / (1.0 - p)
        draw = rng.random(n_joints + 2 * hidden) >= p
        m = draw * keep
        return cls(m[:n_joints], m[n_joints : n_joints + hidden], m[n_joints + hidden :])

    @classmethod
    def from_seed(cls, seed: int, n_joints: int, hidden: int, p: float) -> "DropoutMaskSet":
        return cls.sample(np.random.default_rng(seed), n_joints, hidden, p)

    @classmethod
    def all_keep(cls, n_joints: int, hidden: int) -> "DropoutMaskSet":
        return cls(np.ones(n_joints), np.ones(hidden), np.ones(hidden))

    def feature_mask(self) -> np.ndarray:
        """The joint mask spread over all 9 feature channels of each joint."""
        return np.tile(np.repeat(self.input_joint, 3), 3)


@dataclass(frozen=True)
class ProbabilisticPrediction:
    mean_frames: np.ndarray  # (T_f, J, 3)
    sigma: np.ndarray  # (T_f, J)
    mask_seed: int | None = None
    velocities: np.ndarray | None = field(default=None, repr=False)  # (T_f, J, 3)

    @property
    def horizon(self) -> int:
        return self.mean_frames.shape[0]


@dataclass(frozen=True)
class McEnsemble:
    members: tuple[ProbabilisticPrediction, ...]

    def __post_init__(self):
        if len(self.members) < 2:
            raise ValueError("an MC ensemble needs at least 2 members")
        shape = self.members[0].mean_frames.shape
        for m in self.members:
            if m.mean_frames.shape != shape or m.sigma.shape != shape[:2]:
                raise ValueError("ensemble members must share horizon and joint count")

    def __len__(self):
        return len(self.members)

    def means(self) -> np.ndarray:
        """(N, T_f, J, 3)"""
        return np.stack([m.mean_frames for m in self.members])

    def sigmas(self) -> np.ndarray:
        """(N, T_f, J)"""
        return np.stack([m.sigma for m in self.members])

    def mean_prediction(self) -> np.ndarray:
        return self.means().mean(axis=0)


@dataclass(frozen=True)
class DynamicsFeature:
    position: np.ndarray
    velocity: np.ndarray
    acceleration: np.ndarray

    def vector(self) -> np.ndarray:
        return np.concatenate([self.position.ravel(), self.velocity.ravel(), self.acceleration.ravel()])


# ---------------------------------------------------------------------------
# Building blocks
# ---------------------------------------------------------------------------


def dynamics_features(first, second, third) -> DynamicsFeature:
    first, second, third = (np.asarray(f, dtype=np.float64) for f in (first, second, third))
    if not first.shape == second.shape == third.shape:
        raise ValueError("the three frames must share a shape")
    v = third - second
    a = v - (second - first)
    return DynamicsFeature(third, v, a)


def _features(p2, p1, p0, mean, scale):
    """Batched normalized ``[x, v, a]`` from three flat frames ``(B, 3J)`` each."""
    v = p0 - p1
    a = v - (p1 - p2)
    return np.concatenate([(p0 - mean) / scale, v / scale, a / scale], axis=-1)


def gru_cell_forward(W, U, b, h, x, h_mask=None):
    """One GRU step ``h' = (1 - z) * h + z * n``.

    ``W`` is (in, 3H), ``U`` is (H, 3H), ``b`` is (3H,). ``h_mask`` scales the state seen by
    ``U`` only. Works on single vectors or on batches along the leading axis.
    """
    H = U.shape[0]
    hm = h if h_mask is None else h * h_mask
    xw = x @ W + b
    hu = hm @ U[:, : 2 * H]
    z = sigmoid(xw[..., :H] + hu[..., :H])
    r = sigmoid(xw[..., H : 2 * H] + hu[..., H:])
    n = np.tanh(xw[..., 2 * H :] + (r * hm) @ U[:, 2 * H :])
    return (1.0 - z) * h + z * n


def _gru_step(W, U, b, h, x, m):
    """Batched GRU step keeping everything the backward pass needs."""
    H = U.shape[0]
    hm = h * m
    xw = x @ W + b
    hu = hm @ U[:, : 2 * H]
    z = sigmoid(xw[:, :H] + hu[:, :H])
    r = sigmoid(xw[:, H : 2 * H] + hu[:, H:])
    rh = r * hm
    n = np.tanh(xw[:, 2 * H :] + rh @ U[:, 2 * H :])
    h_new = (1.0 - z) * h + z * n
    return h_new, (x, h, hm, z, r, rh, n)


# ---------------------------------------------------------------------------
# Batched forward pass
# ---------------------------------------------------------------------------


@dataclass
class BatchMasks:
    input_feat: np.ndarray  # (B, 9J)
    hidden_enc: np.ndarray  # (B, H)
    hidden_dec: np.ndarray  # (B, H)

    @classmethod
    def stack(cls, masks: list[DropoutMaskSet]) -> "BatchMasks":
        return cls(
            np.stack([m.feature_mask() for m in masks]),
            np.stack([m.hidden_enc for m in masks]),
            np.stack([m.hidden_dec for m in masks]),
        )


@dataclass
class ForwardResult:
    positions: np.ndarray  # (B, T_f, 3J) predicted means, meters
    velocities: np.ndarray  # (B, T_f, 3J)
    log_var: np.ndarray  # (B, T_f, J)
    cache: dict | None = None

    @property
    def sigma2(self) -> np.ndarray:
        return np.maximum(np.exp(self.log_var), SIGMA2_FLOOR)


def forward(params: ModelParams, observed: np.ndarray, t_f: int, masks: BatchMasks, keep_cache: bool = False) -> ForwardResult:
    """Run the network on a batch of observed windows ``(B, T_p, 3J)`` (meters)."""
    B, T_p, D = observed.shape
    J, H = params.n_joints, params.hidden
    if T_p < 3:
        raise ValueError("observed window needs at least 3 frames")
    if D != 3 * J:
        raise ValueError(f"observed has {D} coordinates per frame, model expects {3 * J}")
    w = params.weights
    mean = params.stats.mean.ravel()
    scale = params.stats.scale.ravel()

    h = np.zeros((B, H))
    enc_steps = []
    for t in range(2, T_p):
        x = _features(observed[:, t - 2], observed[:, t - 1], observed[:, t], mean, scale) * masks.input_feat
        h, step = _gru_step(w["enc_W"], w["enc_U"], w["enc_b"], h, x, masks.hidden_enc)
        if keep_cache:
            enc_steps.append(step)

    # P[k] holds the pose at decoder time k - 2; entries 0..2 are the last observed frames.
    P = np.empty((B, t_f + 3, D))
    P[:, :3] = observed[:, -3:]
    vel = np.empty((B, t_f, D))
    log_var = np.empty((B, t_f, J))
    dec_steps, head_in = [], []
    for k in range(t_f):
        x = _features(P[:, k], P[:, k + 1], P[:, k + 2], mean, scale) * masks.input_feat
        h, step = _gru_step(w["dec_W"], w["dec_U"], w["dec_b"], h, x, masks.hidden_dec)
        hd = h * masks.hidden_dec
        out = hd @ w["out_W"] + w["out_b"]
        vel[:, k] = out[:, : 3 * J] * scale
        log_var[:, k] = out[:, 3 * J :]
        P[:, k + 3] = P[:, k + 2] + vel[:, k]
        if keep_cache:
            dec_steps.append(step)
            head_in.append(hd)

    cache = None
    if keep_cache:
        cache = {"enc": enc_steps, "dec": dec_steps, "head_in": head_in, "P": P, "masks": masks}
    return ForwardResult(P[:, 3:].copy(), vel, log_var, cache)


# ---------------------------------------------------------------------------
# Single-sample API
# ---------------------------------------------------------------------------


def _check_observed(params: ModelParams, observed: MotionSequence):
    if len(observed) < 3:
        raise ValueError("encoding needs at least 3 observed frames")
    if observed.n_joints != params.n_joints:
        raise ValueError(f"observed has {observed.n_joints} joints, model expects {params.n_joints}")


def encode(params: ModelParams, masks: DropoutMaskSet, observed: MotionSequence, trace: list | None = None) -> np.ndarray:
    """Final encoder hidden state; one GRU step per frame from the third onward."""
    _check_observed(params, observed)
    w = params.weights
    mean, scale = params.stats.mean.ravel(), params.stats.scale.ravel()
    fm = masks.feature_mask()
    flat = observed.flat()
    h = np.zeros(params.hidden)
    for t in range(2, len(flat)):
        x = _features(flat[t - 2], flat[t - 1], flat[t], mean, scale) * fm
        h = gru_cell_forward(w["enc_W"], w["enc_U"], w["enc_b"], h, x, masks.hidden_enc)
        if trace is not None:
            trace.append(("enc", t, fm.copy(), masks.hidden_enc.copy()))
    return h


def decode_step(params: ModelParams, masks: DropoutMaskSet, h: np.ndarray, prev: DynamicsFeature, trace: list | None = None):
    """One decoder step. Returns ``(velocity (3J,), log_var (J,), h')``.

    ``prev`` is the raw (un-normalized) dynamics feature of the latest pose.
    """
    w = params.weights
    J = params.n_joints
    scale = params.stats.scale.ravel()
    fm = masks.feature_mask()
    raw = prev.vector()
    x = np.concatenate([
        (raw[: 3 * J] - params.stats.mean.ravel()) / scale, raw[3 * J : 6 * J] / scale, raw[6 * J :] / scale
    ]) * fm
    h_new = gru_cell_forward(w["dec_W"], w["dec_U"], w["dec_b"], h, x, masks.hidden_dec)
    out = (h_new * masks.hidden_dec) @ w["out_W"] + w["out_b"]
    if trace is not None:
        trace.append(("dec", None, fm.copy(), masks.hidden_dec.copy()))
    return out[: 3 * J] * scale, out[3 * J :], h_new


def sigma_from_log_var(log_var):
    return np.sqrt(np.maximum(np.exp(log_var), SIGMA2_FLOOR))


def predict_with_masks(params: ModelParams, masks: DropoutMaskSet, observed: MotionSequence, t_f: int, trace: list | None = None, mask_seed: int | None = None) -> ProbabilisticPrediction:
    if t_f < 1:
        raise ValueError("t_f must be at least 1")
    h = encode(params, masks, observed, trace)
    J = params.n_joints
    flat = observed.flat()
    hist = [flat[-3], flat[-2], flat[-1]]
    vel = np.empty((t_f, 3 * J))
    lv = np.empty((t_f, J))
    pos = np.empty((t_f, 3 * J))
    for k in range(t_f):
        feat = dynamics_features(*hist[-3:])
        vel[k], lv[k], h = decode_step(params, masks, h, feat, trace)
        pos[k] = hist[-1] + vel[k]
        hist.append(pos[k])
    return ProbabilisticPrediction(
        pos.reshape(t_f, J, 3), sigma_from_log_var(lv), mask_seed, vel.reshape(t_f, J, 3)
    )


def predict_once(params: ModelParams, mask_seed: int, observed: MotionSequence, t_f: int) -> ProbabilisticPrediction:
    """One stochastic pass with the dropout masks drawn from ``mask_seed``."""
    _check_observed(params, observed)
    masks = DropoutMaskSet.from_seed(mask_seed, params.n_joints, params.hidden, params.dropout)
    return predict_with_masks(params, masks, observed, t_f, mask_seed=mask_seed)


def predict_deterministic(params: ModelParams, observed: MotionSequence, t_f: int) -> ProbabilisticPrediction:
    """Dropout switched off (all units kept); the inverted-dropout mean network."""
    _check_observed(params, observed)
    masks = DropoutMaskSet.all_keep(params.n_joints, params.hidden)
    return predict_with_masks(params, masks, observed, t_f)


def mc_sample(params: ModelParams, observed: MotionSequence, n: int = DEFAULT_N_SAMPLES, t_f: int | None = None, base_seed: int = 0) -> McEnsemble:
    """``n`` stochastic passes with mask seeds ``base_seed .. base_seed + n - 1``."""
    return mc_sample_many(params, [observed], n, t_f, base_seed)[0]


def mc_sample_many(params: ModelParams, windows: list[MotionSequence], n: int = DEFAULT_N_SAMPLES, t_f: int | None = None, base_seed: int = 0, chunk: int = 512) -> list[McEnsemble]:
    """MC ensembles for many windows, batched; window ``i`` uses seeds ``base_seed + k``."""
    if n < 2:
        raise ValueError("need at least 2 MC samples")
    t_f = params.t_f if t_f is None else t_f
    if t_f < 1:
        raise ValueError("t_f must be at least 1")
    for w in windows:
        _check_observed(params, w)
    seeds = list(range(base_seed, base_seed + n))
    mask_list = [DropoutMaskSet.from_seed(s, params.n_joints, params.hidden, params.dropout) for s in seeds]
    J = params.n_joints
    # without dropout every member is the same pass; run it once so members are bitwise equal
    n_pass = 1 if params.dropout == 0.0 else n
    jobs = [(i, k) for i in range(len(windows)) for k in range(n_pass)]
    pos = np.empty((len(jobs), t_f, 3 * J))
    vel = np.empty_like(pos)
    lv = np.empty((len(jobs), t_f, J))
    for start in range(0, len(jobs), chunk):
        part = jobs[start : start + chunk]
        obs = np.stack([windows[i].flat() for i, _ in part])
        bm = BatchMasks.stack([mask_list[k] for _, k in part])
        res = forward(params, obs, t_f, bm)
        sl = slice(start, start + len(part))
        pos[sl], vel[sl], lv[sl] = res.positions, res.velocities, res.log_var
    out = []
    for i in range(len(windows)):
        members = []
        for k in range(n):
            j = i * n_pass + min(k, n_pass - 1)
            members.append(ProbabilisticPrediction(
                pos[j].reshape(t_f, J, 3), sigma_from_log_var(lv[j]), seeds[k], vel[j].reshape(t_f, J, 3)
            ))
        out.append(McEnsemble(tuple(members)))
    return out
