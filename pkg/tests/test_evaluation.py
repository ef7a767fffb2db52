import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from bayesmotion.data import MotionSequence, window_many
from bayesmotion.evaluation import (
    CSV_HEADER, EvalReport, EvalRow, evaluate, mpjpe, render_csv, render_table, report_render, resolve_methods,
)
from bayesmotion.model import init_params
from bayesmotion.uncertainty import DetectorCalibration

from conftest import random_walk


def test_mpjpe_examples():
    x = np.random.default_rng(0).normal(size=(5, 3, 3))
    assert mpjpe(x, x, 5) == 0.0
    assert mpjpe(x + np.array([0.1, 0, 0]), x, 5) == pytest.approx(0.1, abs=1e-12)
    pred = np.zeros((1, 2, 3))
    truth = np.array([[[0.1, 0, 0], [0, 0.3, 0]]])
    assert mpjpe(pred, truth, 1) == pytest.approx(0.2, abs=1e-15)
    with pytest.raises(ValueError):
        mpjpe(x, x, 6)
    with pytest.raises(ValueError):
        mpjpe(x, x, 0)


@given(seed=st.integers(0, 10_000), d=st.lists(st.floats(-1, 1), min_size=3, max_size=3))
def test_mpjpe_translation_detectable(seed, d):
    x = np.random.default_rng(seed).normal(size=(6, 4, 3))
    assert mpjpe(x + np.array(d), x, 6) == pytest.approx(float(np.linalg.norm(d)), abs=1e-12)


@given(seed=st.integers(0, 10_000), h=st.integers(1, 8))
def test_mpjpe_prefix_consistency(seed, h):
    rng = np.random.default_rng(seed)
    p, t = rng.normal(size=(8, 2, 3)), rng.normal(size=(8, 2, 3))
    assert mpjpe(p, t, h) == pytest.approx(mpjpe(p[:h], t[:h], h), abs=0)


# --- evaluate ---------------------------------------------------------------------------


def _windows(const=False, n=3):
    rng = np.random.default_rng(1)
    seqs = []
    for _ in range(n):
        if const:
            seqs.append(MotionSequence(np.repeat(rng.normal(size=(1, 2, 3)), 70, axis=0)))
        else:
            seqs.append(random_walk(rng, 70, 2, step=0.01))
    return window_many(seqs, 10, 50, 10)


def test_zero_velocity_on_static_data():
    rep = evaluate(["zerovel"], _windows(const=True))
    assert all(v == 0.0 for v in rep.rows[0].mpjpe.values())
    assert rep.rows[0].det_pct is None


def test_rejecting_everything_leaves_blank_cells():
    params = init_params(2, 4, 0.5, seed=0, t_p=10, t_f=50)
    calib = DetectorCalibration(-1.0, 0.95, 10)  # nothing is below a negative threshold
    rep = evaluate(["fmp", "fmp_umd", "fmp_umd_oms"], _windows(), params, calib, n_samples=3)
    gated = rep.rows[1]
    assert gated.det_pct == 100.0 and gated.accepted == 0
    assert all(v is None for v in gated.mpjpe.values())
    line = render_csv(rep).splitlines()[2]
    assert line == "fmp_umd,-,-,100.00,-,-,-,-,-,0,6"
    assert rep.rows[0].det_pct is None and rep.rows[0].accepted == 6


def test_detection_plus_acceptance_is_total():
    params = init_params(2, 4, 0.5, seed=0, t_p=10, t_f=50)
    w = params.weights
    w["out_W"] = np.random.default_rng(0).normal(0, 0.3, size=w["out_W"].shape)
    params = params.with_weights(w)
    windows = _windows(n=6)
    from bayesmotion.uncertainty import calibrate_threshold

    calib = calibrate_threshold(params, [x.observed for x in windows], 4, 0.5)
    rep = evaluate(["fmp_umd"], windows, params, calib, n_samples=4)
    row = rep.rows[0]
    assert row.accepted + row.rejected == len(windows)
    assert row.det_pct == pytest.approx(100.0 * row.rejected / len(windows))
    assert 0 < row.rejected < len(windows)


def test_evaluate_is_reproducible_and_ordered():
    params = init_params(2, 4, 0.5, seed=0, t_p=10, t_f=50)
    calib = DetectorCalibration(1.0, 0.95, 10)
    names = ["zerovel", "fmp", "fmp_umd", "fmp_umd_oms"]
    a = report_render(evaluate(names, _windows(), params, calib, n_samples=3, base_seed=7))
    b = report_render(evaluate(names, _windows(), params, calib, n_samples=3, base_seed=7))
    assert a == b
    rows = a[1].splitlines()
    assert rows[0] == CSV_HEADER
    assert [r.split(",")[0] for r in rows[1:]] == names


def test_selected_member_and_truncation_flags():
    params = init_params(2, 4, 0.5, seed=0, t_p=10, t_f=50, init_log_var=2 * np.log(0.1))
    calib = DetectorCalibration(1.0, 0.95, 10)
    windows = _windows()
    full = evaluate(["fmp_umd_oms"], windows, params, calib, n_samples=3)
    assert all(v is not None for v in full.rows[0].mpjpe.values())
    # sigma 0.1 everywhere: 1.28 * 0.1 < 0.2 keeps everything; e_max 0.1 keeps nothing
    short = evaluate(["fmp_umd_oms"], windows, params, calib, n_samples=3, e_max=0.1, truncate=True)
    assert all(v is None for v in short.rows[0].mpjpe.values())


def test_evaluate_errors():
    with pytest.raises(ValueError, match="empty"):
        evaluate(["zerovel"], [])
    with pytest.raises(ValueError, match="parameters"):
        evaluate(["fmp"], _windows())
    params = init_params(2, 4, 0.5, seed=0, t_p=10, t_f=50)
    with pytest.raises(ValueError, match="calibration"):
        evaluate(["fmp_umd"], _windows(), params)
    with pytest.raises(ValueError, match="unknown method"):
        resolve_methods(["nope"])
    short = window_many([random_walk(np.random.default_rng(0), 30, 2)], 10, 20, 10)
    with pytest.raises(ValueError, match="milestone"):
        evaluate(["zerovel"], short)


# --- rendering -------------------------------------------------------------------------


def _report(value):
    row = EvalRow("zerovel", "-", "walking", None, {400: value, 800: None}, 3, 0)
    return EvalReport([row], (400, 800))


def test_rendering_rules():
    table, csv_text = report_render(_report(0.0536))
    assert csv_text.splitlines() == [
        "method,train_set,test_set,det_pct,mpjpe_400,mpjpe_800,accepted,rejected",
        "zerovel,-,walking,-,0.054,-,3,0",
    ]
    lines = table.splitlines()
    assert len(lines) == 2 and "0.054" in lines[1] and lines[0].split()[-2:] == ["400ms", "800ms"]
    with pytest.raises(ValueError):
        render_table(EvalReport([], (400,)))
