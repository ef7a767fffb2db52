"""MPJPE, MPJPE-on-acceptance and detection-rate reports in the layout of the benchmark tables."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import WindowPair, ms_to_frame, zero_velocity_baseline

DEFAULT_MILESTONES_MS = (400, 800, 1200, 1600, 2000)
CSV_HEADER = "method,train_set,test_set,det_pct,mpjpe_400,mpjpe_800,mpjpe_1200,mpjpe_1600,mpjpe_2000,accepted,rejected"


def mpjpe(pred_frames, truth_frames, horizon_frames: int) -> float:
    """Mean Euclidean joint error over frames ``1..horizon_frames`` (meters)."""
    pred = np.asarray(pred_frames, dtype=np.float64)
    truth = np.asarray(truth_frames, dtype=np.float64)
    if horizon_frames < 1:
        raise ValueError("horizon must be at least one frame")
    if horizon_frames > pred.shape[0] or horizon_frames > truth.shape[0]:
        raise ValueError(
            f"horizon {horizon_frames} exceeds prediction ({pred.shape[0]}) or truth ({truth.shape[0]}) length"
        )
    if pred.shape[1:] != truth.shape[1:]:
        raise ValueError("prediction and truth joint layouts differ")
    diff = pred[:horizon_frames] - truth[:horizon_frames]
    return float(np.sqrt(np.sum(diff * diff, axis=-1)).mean())


@dataclass(frozen=True)
class Method:
    """How a table row is produced.

    ``kind`` is ``zerovel`` (copy last frame), ``det`` (dropout-off network) or ``fmp``
    (MC ensemble). ``gate`` applies the EU detector; ``select`` scores the lowest-sigma member.
    """

    name: str
    kind: str
    gate: bool = False
    select: bool = False
    train_set: str = "-"


STANDARD_METHODS = {
    "zerovel": Method("zerovel", "zerovel"),
    "det": Method("det", "det"),
    "fmp": Method("fmp", "fmp"),
    "fmp_umd": Method("fmp_umd", "fmp", gate=True),
    "fmp_umd_oms": Method("fmp_umd_oms", "fmp", gate=True, select=True),
}


def resolve_methods(names) -> list[Method]:
    out = []
    for n in names:
        if isinstance(n, Method):
            out.append(n)
        elif n in STANDARD_METHODS:
            out.append(STANDARD_METHODS[n])
        else:
            raise ValueError(f"unknown method {n!r}; choose from {sorted(STANDARD_METHODS)}")
    return out


@dataclass
class EvalRow:
    method: str
    train_set: str
    test_set: str
    det_pct: float | None
    mpjpe: dict[int, float | None]
    accepted: int
    rejected: int


@dataclass
class EvalReport:
    rows: list[EvalRow] = field(default_factory=list)
    milestones_ms: tuple[int, ...] = DEFAULT_MILESTONES_MS


def evaluate(
    methods,
    test_windows: list[WindowPair],
    params=None,
    calibration=None,
    milestones_ms=DEFAULT_MILESTONES_MS,
    n_samples: int = 30,
    base_seed: int = 0,
    train_set: str = "-",
    test_set: str = "-",
    lam: float | None = None,
    e_max: float | None = None,
    truncate: bool = False,
    error_of_mean: bool = True,
) -> EvalReport:
    """Score every method on the same windows.

    Gated methods drop windows whose EU score reaches the calibrated threshold and average
    MPJPE over the accepted ones only. With ``truncate`` the selected member only counts
    at milestones inside its trustworthy length. ``error_of_mean=False`` averages member
    errors instead of scoring the ensemble-mean prediction.
    """
    from .model import mc_sample_many, predict_deterministic
    from .uncertainty import (
        DEFAULT_E_MAX, DEFAULT_LAMBDA, REJECT, detect_unseen, epistemic_variance, select_optimal, trustworthy_length,
    )

    if not test_windows:
        raise ValueError("test set is empty")
    methods = resolve_methods(methods)
    lam = DEFAULT_LAMBDA if lam is None else lam
    e_max = DEFAULT_E_MAX if e_max is None else e_max
    rate = test_windows[0].future.frame_rate_hz
    t_f = len(test_windows[0].future)
    frames = [ms_to_frame(ms, rate) for ms in milestones_ms]
    if max(frames) > t_f:
        raise ValueError(f"milestone {max(milestones_ms)} ms needs {max(frames)} future frames, windows have {t_f}")
    truths = [w.future.frames for w in test_windows]

    need_model = any(m.kind != "zerovel" for m in methods)
    if need_model and params is None:
        raise ValueError("model parameters are required for network methods")
    if any(m.gate for m in methods) and calibration is None:
        raise ValueError("gated methods need a detector calibration")

    ensembles = None
    if any(m.kind == "fmp" for m in methods):
        ensembles = mc_sample_many(params, [w.observed for w in test_windows], n_samples, t_f, base_seed)
        verdicts = (
            [detect_unseen(epistemic_variance(e), calibration) for e in ensembles] if calibration is not None else None
        )

    report = EvalReport(milestones_ms=tuple(milestones_ms))
    for method in methods:
        keep = list(range(len(test_windows)))
        if method.gate:
            keep = [i for i in keep if verdicts[i] != REJECT]
        rejected = len(test_windows) - len(keep)
        per_ms: dict[int, list[float]] = {ms: [] for ms in milestones_ms}
        for i in keep:
            truth = truths[i]
            limit = t_f
            if method.kind == "zerovel":
                preds = [zero_velocity_baseline(test_windows[i].observed, t_f)]
            elif method.kind == "det":
                preds = [predict_deterministic(params, test_windows[i].observed, t_f).mean_frames]
            elif method.select:
                member = ensembles[i].members[select_optimal(ensembles[i])]
                preds = [member.mean_frames]
                if truncate:
                    limit = trustworthy_length(member.sigma, lam, e_max)
            elif error_of_mean:
                preds = [ensembles[i].mean_prediction()]
            else:
                preds = list(ensembles[i].means())
            for ms, fr in zip(milestones_ms, frames):
                if fr <= limit:
                    per_ms[ms].append(float(np.mean([mpjpe(p, truth, fr) for p in preds])))
        mp = {ms: (float(np.mean(v)) if v else None) for ms, v in per_ms.items()}
        det = 100.0 * rejected / len(test_windows) if method.gate else None
        report.rows.append(EvalRow(method.name, method.train_set if method.train_set != "-" else train_set, test_set, det, mp, len(keep), rejected))
    return report


# ---------------------------------------------------------------------------
# Rendering
# ---------------------------------------------------------------------------


def _fmt(v, digits=3):
    return "-" if v is None else f"{v:.{digits}f}"


def render_csv(report: EvalReport) -> str:
    header = "method,train_set,test_set,det_pct," + ",".join(f"mpjpe_{ms}" for ms in report.milestones_ms) + ",accepted,rejected"
    lines = [header]
    for r in report.rows:
        cells = [r.method, r.train_set, r.test_set, _fmt(r.det_pct, 2)]
        cells += [_fmt(r.mpjpe[ms]) for ms in report.milestones_ms]
        cells += [str(r.accepted), str(r.rejected)]
        lines.append(",".join(cells))
    return "\n".join(lines) + "\n"


def render_table(report: EvalReport) -> str:
    if not report.rows:
        raise ValueError("report has no rows")
    head = ["model", "Train Set", "Test Set", "Det. %"] + [f"{ms}ms" for ms in report.milestones_ms]
    body = []
    for r in report.rows:
        det = "-" if r.det_pct is None else f"{r.det_pct:.2f}%"
        body.append([r.method, r.train_set, r.test_set, det] + [_fmt(r.mpjpe[ms]) for ms in report.milestones_ms])
    widths = [max(len(row[i]) for row in [head] + body) for i in range(len(head))]
    fmt = lambda row: "  ".join(c.ljust(w) if i < 3 else c.rjust(w) for i, (c, w) in enumerate(zip(row, widths)))
    return "\n".join([fmt(head)] + [fmt(r) for r in body]) + "\n"


def report_render(report: EvalReport) -> tuple[str, str]:
    """Fixed-width text table and CSV."""
    return render_table(report), render_csv(report)
