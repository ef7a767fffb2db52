import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.stats import ncx2

from bayesmotion.trajectory import (
    PlanConfig, Trajectory, UncertaintyField, canonical_scene, collision_probability_profile, field_value,
    field_values, optimize, parse_scene, plan_cost, plan_csv, sphere_capture_probability,
)


def _ncx2_oracle(d, s, r):
    if d == 0:
        from scipy.stats import chi2

        return float(chi2.cdf((r / s) ** 2, 3))
    return float(ncx2.cdf((r / s) ** 2, 3, (d / s) ** 2))


@given(d=st.floats(0, 3), s=st.floats(0.01, 1.0), r=st.floats(0.01, 1.0))
def test_capture_probability_matches_noncentral_chi2(d, s, r):
    got = float(sphere_capture_probability(d, s, r))
    assert abs(got - _ncx2_oracle(d, s, r)) <= 1e-6
    assert 0.0 <= got <= 1.0


def test_capture_probability_near_center_branch_is_continuous():
    s, r = 0.1, 0.25
    at_switch = [float(sphere_capture_probability(s * k, s, r)) for k in (0.0, 0.99e-4, 1.01e-4, 1e-3)]
    assert np.allclose(at_switch, _ncx2_oracle(0.0, s, r), atol=1e-8)


def test_capture_probability_monte_carlo():
    rng = np.random.default_rng(2024)
    n = 100_000
    for _ in range(15):
        s, r = rng.uniform(0.02, 0.5), rng.uniform(0.05, 0.6)
        d = rng.uniform(0.0, 2.0 * r + 2.0 * s)
        draws = rng.normal(0.0, s, size=(n, 3)) + np.array([d, 0.0, 0.0])
        est = np.mean(np.linalg.norm(draws, axis=1) <= r)
        p = float(sphere_capture_probability(d, s, r))
        se = max(np.sqrt(p * (1 - p) / n), 1.0 / n)
        assert abs(est - p) <= 3 * se, (d, s, r, est, p)


def test_field_limits():
    field = UncertaintyField.static([[0.0, 0.0, 0.0]], [0.01], safety_radius=0.1)
    assert field_value(field, [0.1 + 0.1 + 0.01, 0, 0], 0) < 1e-6  # >= 10 sigma + r_s away
    assert field_value(field, [0.0, 0.0, 0.0], 0) > 1 - 1e-6
    tight = UncertaintyField.static([[0.0, 0.0, 0.0]], [1e-9], safety_radius=0.1)
    assert field_value(tight, [0.05, 0, 0], 0) == pytest.approx(1.0)
    assert field_value(tight, [0.15, 0, 0], 0) == pytest.approx(0.0, abs=1e-12)
    assert field_value(UncertaintyField.empty(3), [0, 0, 0], 1) == 0.0


@given(seed=st.integers(0, 10_000))
def test_field_bounded_and_monotone_along_rays(seed):
    rng = np.random.default_rng(seed)
    centers = rng.normal(size=(1, 3))
    field = UncertaintyField.static(centers, [rng.uniform(0.02, 0.5)], rng.uniform(0.05, 0.5))
    direction = rng.normal(size=3)
    direction /= np.linalg.norm(direction)
    vals = [field_value(field, centers[0] + t * direction, 0) for t in np.linspace(0, 3, 60)]
    assert all(0.0 <= v <= 1.0 for v in vals)
    assert all(b <= a + 1e-12 for a, b in zip(vals, vals[1:]))


def test_field_takes_max_over_joints_and_clamps_time():
    means = np.array([[[0.0, 0, 0], [1.0, 0, 0]], [[5.0, 0, 0], [6.0, 0, 0]]])
    field = UncertaintyField(means, np.full((2, 2), 0.05), 0.2)
    assert field_value(field, [1.0, 0, 0], 0) == pytest.approx(field_value(field, [0.0, 0, 0], 0))
    assert field_value(field, [6.0, 0, 0], 99) == field_value(field, [6.0, 0, 0], 1)
    with pytest.raises(ValueError):
        UncertaintyField(means, np.zeros((2, 2)), 0.2)


def test_from_prediction_inflates_past_trust_length():
    means = np.arange(4 * 1 * 3, dtype=float).reshape(4, 1, 3)
    sigma = np.full((4, 1), 0.1)
    field = UncertaintyField.from_prediction(means, sigma, 2, 0.2, growth=2.0)
    assert np.array_equal(field.means[2], means[1]) and np.array_equal(field.means[3], means[1])
    assert field.sigma[:, 0].tolist() == pytest.approx([0.1, 0.1, 0.2, 0.4])


def test_resample_endpoints():
    means = np.stack([np.zeros((1, 3)), np.ones((1, 3))])
    field = UncertaintyField(means, np.array([[0.1], [0.3]]), 0.2).resample(5)
    assert field.n_frames == 5
    assert np.allclose(field.means[2], 0.5) and field.sigma[2, 0] == pytest.approx(0.2)


# --- cost and optimizer --------------------------------------------------------------


def test_cost_examples():
    cfg = PlanConfig()
    line = Trajectory.straight_line([0, 0, 0], [1, 0, 0], 11)
    empty = UncertaintyField.empty(1)
    c = plan_cost(line, empty, cfg)
    assert c.obstacle == 0.0 and c.smoothness == pytest.approx(0.0, abs=1e-30)
    zig = line.waypoints.copy()
    zig[1::2, 1] += 0.05
    assert plan_cost(Trajectory(zig), empty, cfg).total > c.total
    scene, field = canonical_scene()
    a, b = plan_cost(scene, field, cfg), plan_cost(scene, field, cfg)
    assert a.total == b.total and np.array_equal(a.per_step, b.per_step)
    assert a.total == pytest.approx(a.per_step.sum(), rel=1e-12)


def test_optimize_fixed_point_on_empty_field():
    line = Trajectory.straight_line([0, 0, 0], [1, 1, 0], 12)
    res = optimize(line, UncertaintyField.empty(1), PlanConfig())
    assert np.allclose(res.trajectory.waypoints, line.waypoints, atol=1e-12)
    assert res.iterations == 0


def test_optimize_canonical_scene():
    start, field = canonical_scene()
    cfg = PlanConfig(max_iterations=120)
    res = optimize(start, field, cfg)
    assert all(b <= a for a, b in zip(res.costs, res.costs[1:]))
    assert np.array_equal(res.trajectory.waypoints[0], start.waypoints[0])
    assert np.array_equal(res.trajectory.waypoints[-1], start.waypoints[-1])
    _, before = collision_probability_profile(start, field)
    _, after = collision_probability_profile(res.trajectory, field)
    assert after < before


def test_obstacle_gradient_matches_full_difference():
    from bayesmotion.trajectory import _obstacle, _obstacle_gradient

    start, field = canonical_scene()
    w = start.waypoints + np.random.default_rng(0).normal(0, 0.02, size=start.waypoints.shape)
    w[0], w[-1] = start.waypoints[0], start.waypoints[-1]
    field = field.resample(len(w))
    fast = _obstacle_gradient(field, w, 1e-4)
    slow = np.zeros_like(w)
    for i in range(1, len(w) - 1):
        for c in range(3):
            up, down = w.copy(), w.copy()
            up[i, c] += 1e-4
            down[i, c] -= 1e-4
            slow[i, c] = (_obstacle(field, up) - _obstacle(field, down)) / 2e-4
    assert np.allclose(fast, slow, atol=1e-10)


def test_trajectory_validation():
    with pytest.raises(ValueError):
        Trajectory(np.zeros((2, 3)))
    with pytest.raises(ValueError):
        PlanConfig(w_smooth=-1.0)
    with pytest.raises(ValueError):
        PlanConfig(step_size=0.0)


# --- scene files ----------------------------------------------------------------------


def test_parse_scene():
    scene = parse_scene("start=0,0,0\ngoal=2,0,0\nT_r=30 r_s=0.3\nobstacle=1,0.05,0,0.1\n# note\nw_smooth=2")
    assert scene.n_waypoints == 30 and scene.config.safety_radius == 0.3 and scene.config.w_smooth == 2.0
    assert len(scene.obstacles) == 1 and scene.obstacles[0][1] == 0.1
    for bad in ("goal=1,0,0", "start=0,0 goal=1,0,0", "start=0,0,0 goal=1,0,0 colour=red",
                "start=0,0,0 goal=1,0,0 obstacle=1,1,1,0", "start=0,0,0 goal=1,0,0 n_waypoints=2"):
        with pytest.raises(ValueError):
            parse_scene(bad)


def test_plan_csv_layout():
    start, field = canonical_scene()
    text = plan_csv(start, field, PlanConfig())
    lines = text.splitlines()
    assert lines[0] == "step,x,y,z,field_value,cost_running"
    assert len(lines) == 41
    running = [float(l.split(",")[-1]) for l in lines[1:]]
    assert running == sorted(running)
    values, peak = collision_probability_profile(start, field)
    assert float(lines[20].split(",")[4]) == pytest.approx(values[19], rel=1e-8)
    assert np.array_equal(values, field_values(field.resample(40), start.waypoints))
