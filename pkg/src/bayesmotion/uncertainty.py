"""Epistemic gating of unseen inputs and aleatoric selection of the most confident sample."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .model import McEnsemble, ModelParams, mc_sample_many

ACCEPT = "accept"
REJECT = "reject"
DEFAULT_LAMBDA = 1.28  # ~ one-sided 90% Gaussian quantile
DEFAULT_E_MAX = 0.20
DEFAULT_QUANTILE = 0.95


class CalibrationError(ValueError):
    pass


@dataclass(frozen=True)
class EpistemicReport:
    elementwise_variance: np.ndarray  # (T_f, 3J)
    scalar_eu: float


def _member_means(ensemble) -> np.ndarray:
    means = ensemble.means() if isinstance(ensemble, McEnsemble) else np.asarray(ensemble, dtype=np.float64)
    if means.shape[0] < 2:
        raise ValueError("epistemic variance needs at least 2 ensemble members")
    return means.reshape(means.shape[0], means.shape[1], -1)


def single_pass_variance(ensemble) -> np.ndarray:
    """Mean of squares minus square of mean, taken literally."""
    f = _member_means(ensemble)
    return np.mean(f * f, axis=0) - np.mean(f, axis=0) ** 2


def epistemic_variance(ensemble) -> EpistemicReport:
    """Population variance of the member means (two-pass), and its mean as a scalar score."""
    f = _member_means(ensemble)
    f = f - f[0]  # shift by one member: identical members give exactly zero
    centered = f - f.mean(axis=0)
    var = np.mean(centered * centered, axis=0)
    var = np.where((var < 0) & (var > -1e-12), 0.0, var)
    return EpistemicReport(var, float(var.mean()))


# ---------------------------------------------------------------------------
# Detector
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DetectorCalibration:
    threshold: float
    quantile: float
    calibration_size: int
    model_hash: str = ""

    def to_text(self) -> str:
        return (
            f"threshold={self.threshold!r} quantile={self.quantile!r} "
            f"M={self.calibration_size} model_hash={self.model_hash or '-'}\n"
        )

    @classmethod
    def from_text(cls, text: str) -> "DetectorCalibration":
        fields = {}
        for tok in text.split():
            if "=" not in tok:
                raise CalibrationError(f"malformed calibration token {tok!r}")
            k, v = tok.split("=", 1)
            fields[k] = v
        try:
            return cls(
                float(fields["threshold"]), float(fields["quantile"]), int(fields["M"]),
                "" if fields.get("model_hash", "-") == "-" else fields["model_hash"],
            )
        except (KeyError, ValueError) as exc:
            raise CalibrationError(f"malformed calibration record: {exc}") from None

    def check_model(self, model_hash: str) -> None:
        if self.model_hash and self.model_hash != model_hash:
            raise CalibrationError(
                f"calibration was made for model {self.model_hash[:12]}, loaded model is {model_hash[:12]}"
            )


def order_statistic_index(quantile: float, m: int) -> int:
    """1-based index ``ceil(q * M)`` clamped to ``[1, M]``."""
    return min(max(math.ceil(quantile * m - 1e-9), 1), m)


def threshold_from_scores(scores, quantile: float = DEFAULT_QUANTILE, model_hash: str = "") -> DetectorCalibration:
    scores = np.sort(np.asarray(scores, dtype=np.float64))
    if scores.size == 0:
        raise CalibrationError("calibration set is empty")
    if not 0.0 < quantile <= 1.0:
        raise ValueError("quantile must lie in (0, 1]")
    k = order_statistic_index(quantile, scores.size)
    return DetectorCalibration(float(scores[k - 1]), quantile, int(scores.size), model_hash)


def ensemble_scores(params: ModelParams, windows, n: int, base_seed: int = 0, t_f: int | None = None) -> np.ndarray:
    ensembles = mc_sample_many(params, windows, n, t_f, base_seed)
    return np.array([epistemic_variance(e).scalar_eu for e in ensembles])


def calibrate_threshold(params: ModelParams, calibration_windows, n: int = 30, quantile: float = DEFAULT_QUANTILE, base_seed: int = 0, model_hash: str = "") -> DetectorCalibration:
    """Threshold at the ``quantile`` order statistic of the calibration windows' EU scores."""
    if len(calibration_windows) < 2:
        raise CalibrationError("calibration needs at least 2 windows")
    return threshold_from_scores(ensemble_scores(params, calibration_windows, n, base_seed), quantile, model_hash)


def detect_unseen(report, calib: DetectorCalibration) -> str:
    """``accept`` iff the EU score is strictly below the threshold."""
    score = report.scalar_eu if isinstance(report, EpistemicReport) else float(report)
    return ACCEPT if score < calib.threshold else REJECT


# ---------------------------------------------------------------------------
# Selector
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SelectionResult:
    optimal_index: int
    trustworthy_length: int
    mean_frames: np.ndarray  # (T, J, 3), truncated
    sigma: np.ndarray  # (T, J), truncated


def select_optimal(ensemble) -> int:
    """Index of the member with the smallest total sigma; lowest index wins ties."""
    sig = ensemble.sigmas() if isinstance(ensemble, McEnsemble) else np.asarray(ensemble)
    totals = sig.reshape(sig.shape[0], -1).sum(axis=1)
    return int(np.argmin(totals))


def trustworthy_length(sigma, lam: float = DEFAULT_LAMBDA, e_max: float = DEFAULT_E_MAX) -> int:
    """Longest prefix whose per-frame sigma (max over joints if 2-D) keeps ``lam * sigma < e_max``."""
    if not (lam > 0 and e_max > 0):
        raise ValueError("lambda and e_max must be positive")
    sig = np.asarray(sigma, dtype=np.float64)
    per_frame = sig.max(axis=1) if sig.ndim == 2 else sig
    ok = lam * per_frame < e_max
    bad = np.flatnonzero(~ok)
    return int(bad[0]) if bad.size else int(per_frame.size)


def select_and_truncate(ensemble: McEnsemble, lam: float = DEFAULT_LAMBDA, e_max: float = DEFAULT_E_MAX) -> SelectionResult:
    i = select_optimal(ensemble)
    member = ensemble.members[i]
    t = trustworthy_length(member.sigma, lam, e_max)
    return SelectionResult(i, t, member.mean_frames[:t], member.sigma[:t])
