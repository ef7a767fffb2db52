import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from bayesmotion.data import (
    MotionFormatError, MotionSequence, NormalizationStats, denormalize, fit_normalization, format_motion,
    load_motion_dir, load_motion_file, ms_to_frame, normalize, save_motion_file, window_dataset, window_many,
    zero_velocity_baseline,
)
from bayesmotion.synthetic import synth_generate

from conftest import random_walk


def _seq(n, joints=2, label="x"):
    return MotionSequence(np.arange(n * joints * 3, dtype=float).reshape(n, joints, 3), 25.0, label)


# --- file format -------------------------------------------------------------


def test_load_well_formed(tmp_path):
    seq = random_walk(np.random.default_rng(0), 100, 17, label="walking")
    path = tmp_path / "a.motion"
    save_motion_file(seq, path)
    back = load_motion_file(path)
    assert len(back) == 100 and back.n_joints == 17 and back.frame_rate_hz == 25.0
    assert back.label == "walking"
    assert np.array_equal(back.frames, seq.frames)


def test_header_layout():
    text = format_motion(_seq(2, joints=1, label="t"))
    lines = text.splitlines()
    assert lines[0] == "MOTION v1"
    assert lines[1] == "joints=1 rate=25 frames=2 label=t"
    assert lines[2].split() == ["0.0", "1.0", "2.0"]


def _write(tmp_path, body):
    p = tmp_path / "f.motion"
    p.write_text(body)
    return p


def test_short_frame_is_named(tmp_path):
    rows = [" ".join(["0.1"] * 51)] * 10
    rows[6] = " ".join(["0.1"] * 48)
    p = _write(tmp_path, "MOTION v1\njoints=17 rate=25 frames=10 label=a\n" + "\n".join(rows) + "\n")
    with pytest.raises(MotionFormatError, match=r"frame 7 has 16 joints"):
        load_motion_file(p)


def test_nan_coordinate_is_named(tmp_path):
    rows = ["0 0 0 0 0 0", "0 0 0 1 nan 1"]
    p = _write(tmp_path, "MOTION v1\njoints=2 rate=25 frames=2 label=a\n" + "\n".join(rows) + "\n")
    with pytest.raises(MotionFormatError, match=r"line 4: frame 2 joint 2 coordinate y"):
        load_motion_file(p)


@pytest.mark.parametrize(
    "text, pattern",
    [
        ("", "line 1"),
        ("MOTION v2\n", "line 1"),
        ("MOTION v1\njoints=2 rate=25\n", "line 2"),
        ("MOTION v1\njoints=2 rate=-1 frames=1\n0 0 0 0 0 0\n", "line 2"),
        ("MOTION v1\njoints=1 rate=25 frames=2\n0 0 0\n", "declares 2 frames"),
        ("MOTION v1\njoints=1 rate=25 frames=1\n0 zero 0\n", "line 3"),
    ],
)
def test_malformed_files(tmp_path, text, pattern):
    with pytest.raises(MotionFormatError, match=pattern):
        load_motion_file(_write(tmp_path, text))


def test_load_dir_sorted(tmp_path):
    for name, label in (("b.motion", "second"), ("a.motion", "first")):
        save_motion_file(_seq(3, label=label), tmp_path / name)
    (tmp_path / "notes.txt").write_text("ignored")
    assert [s.label for s in load_motion_dir(tmp_path)] == ["first", "second"]


def test_sequence_invariants():
    with pytest.raises(ValueError):
        MotionSequence(np.zeros((0, 2, 3)))
    with pytest.raises(ValueError):
        MotionSequence(np.full((1, 2, 3), np.inf))
    with pytest.raises(ValueError):
        MotionSequence(np.zeros((1, 2, 3)), frame_rate_hz=0.0)
    with pytest.raises(ValueError):
        MotionSequence(np.zeros((1, 2, 2)))


# --- windowing -----------------------------------------------------------------


def test_window_examples():
    assert [w.offset for w in window_dataset(_seq(100), 50, 50, 25)] == [0]
    assert [w.offset for w in window_dataset(_seq(100), 10, 10, 80)] == [0, 80]
    assert window_dataset(_seq(5), 50, 50, 1) == []


@given(
    length=st.integers(1, 200), t_p=st.integers(3, 60), t_f=st.integers(1, 60), stride=st.integers(1, 50)
)
def test_window_count_matches_enumeration(length, t_p, t_f, stride):
    seq = _seq(length, joints=1)
    pairs = window_dataset(seq, t_p, t_f, stride)
    expected = [o for o in range(0, 10_000, stride) if o + t_p + t_f <= length]
    assert [p.offset for p in pairs] == expected
    closed = (length - t_p - t_f) // stride + 1 if length >= t_p + t_f else 0
    assert len(pairs) == closed
    for p in pairs:
        assert len(p.observed) == t_p and len(p.future) == t_f
        # contiguous: the future starts right after the observed window
        assert np.array_equal(p.observed.frames, seq.frames[p.offset : p.offset + t_p])
        assert np.array_equal(p.future.frames, seq.frames[p.offset + t_p : p.offset + t_p + t_f])


def test_window_preconditions():
    with pytest.raises(ValueError):
        window_dataset(_seq(10), 2, 1, 1)
    with pytest.raises(ValueError):
        window_dataset(_seq(10), 3, 0, 1)
    with pytest.raises(ValueError):
        window_dataset(_seq(10), 3, 1, 0)
    assert len(window_many([_seq(10), _seq(4)], 3, 2, 5)) == 2


# --- normalization ---------------------------------------------------------------


def test_fit_normalization_examples():
    same = MotionSequence(np.ones((4, 2, 3)) * 3.0)
    stats = fit_normalization([same])
    assert np.array_equal(stats.mean, np.full((2, 3), 3.0)) and np.array_equal(stats.scale, np.ones((2, 3)))

    two = MotionSequence(np.stack([np.zeros((1, 3)), np.full((1, 3), 2.0)]))
    stats = fit_normalization([two])
    assert np.allclose(stats.mean, 1.0) and np.allclose(stats.scale, 1.0)

    single = MotionSequence(np.array([[[1.0, 2.0, 3.0]]]))
    stats = fit_normalization([single])
    assert np.array_equal(stats.mean, single.frames[0]) and np.array_equal(stats.scale, np.ones((1, 3)))

    with pytest.raises(ValueError):
        fit_normalization([])


def test_stats_reject_nonpositive_scale():
    with pytest.raises(ValueError):
        NormalizationStats(np.zeros((1, 3)), np.array([[1.0, 0.0, 1.0]]))


@given(seed=st.integers(0, 10_000), n=st.integers(1, 30), j=st.integers(1, 5))
def test_normalize_round_trip(seed, n, j):
    rng = np.random.default_rng(seed)
    seq = MotionSequence(rng.uniform(-10, 10, size=(n, j, 3)))
    stats = NormalizationStats(rng.normal(size=(j, 3)), rng.uniform(0.01, 5.0, size=(j, 3)))
    back = denormalize(normalize(seq, stats), stats)
    assert np.max(np.abs(back.frames - seq.frames)) < 1e-9


def test_normalize_identity_and_centering():
    seq = random_walk(np.random.default_rng(1), 5, 3)
    assert np.array_equal(normalize(seq, NormalizationStats.identity(3)).frames, seq.frames)
    stats = NormalizationStats(seq.frames[2], np.full((3, 3), 2.0))
    assert np.array_equal(normalize(seq, stats).frames[2], np.zeros((3, 3)))
    with pytest.raises(ValueError):
        normalize(seq, NormalizationStats.identity(4))


# --- zero velocity -------------------------------------------------------------------


def test_zero_velocity_baseline():
    seq = random_walk(np.random.default_rng(2), 7, 4)
    out = zero_velocity_baseline(seq, 50)
    assert out.shape == (50, 4, 3)
    assert all(np.array_equal(f, seq.frames[-1]) for f in out)
    assert zero_velocity_baseline(seq, 0).shape == (0, 4, 3)


def test_zero_velocity_on_static_motion_is_exact():
    from bayesmotion.evaluation import mpjpe

    const = MotionSequence(np.ones((10, 3, 3)))
    assert mpjpe(zero_velocity_baseline(const, 10), np.ones((10, 3, 3)), 10) == 0.0


def test_milestones_land_on_frames():
    assert [ms_to_frame(ms, 25.0) for ms in (400, 800, 1200, 1600, 2000)] == [10, 20, 30, 40, 50]
    assert ms_to_frame(50, 25.0) == 1  # 1.25 frames rounds to 1
    assert ms_to_frame(60, 25.0) == 2  # 1.5 rounds up


# --- synthetic families ----------------------------------------------------------------


def test_synth_is_pure():
    a = synth_generate("A", 7, 100)
    b = synth_generate("A", 7, 100)
    assert np.array_equal(a.frames, b.frames) and a.label == b.label
    assert not np.array_equal(a.frames, synth_generate("A", 8, 100).frames)
    assert synth_generate("B", 7, 100).frames.shape == (100, 17, 3)
    with pytest.raises(ValueError):
        synth_generate("C", 1, 10)
    with pytest.raises(ValueError):
        synth_generate("A", 1, 0)


def test_synth_prefix_stability():
    # a longer draw extends, never rewrites, the shorter one
    short, long = synth_generate("B", 3, 40), synth_generate("B", 3, 80)
    assert np.array_equal(short.frames, long.frames[:40])


def _mean_displacement(seqs, stats):
    """Mean distance of a normalized joint from the training centroid, by explicit loops."""
    total, count = 0.0, 0
    for s in seqs:
        f = normalize(s, stats).frames
        for t in range(f.shape[0]):
            for j in range(f.shape[1]):
                total += math.sqrt(sum(c * c for c in f[t, j]))
                count += 1
    return total / count


def test_family_b_is_out_of_distribution():
    stats = fit_normalization([synth_generate("A", s, 200) for s in range(8)])
    held_a = _mean_displacement([synth_generate("A", s, 200) for s in range(100, 104)], stats)
    fam_b = _mean_displacement([synth_generate("B", s, 200) for s in range(100, 104)], stats)
    assert fam_b > held_a
    # frozen values of this generator
    assert held_a == pytest.approx(1.838067933614041, rel=1e-9)
    assert fam_b == pytest.approx(19.76709975660502, rel=1e-9)
