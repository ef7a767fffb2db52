"""Point-robot trajectory optimization against a predicted human-occupancy field.

The field at a point is the largest probability, over joints, that the joint lies within
the safety radius of that point, each joint being an isotropic Gaussian from the selected
prediction. The objective is a CHOMP-style weighted sum of an occupancy term (field value
times local path length) and a squared-second-difference smoothness term.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np
from scipy.special import ndtr

_SQRT_2PI = np.sqrt(2.0 * np.pi)
_SMALL_OFFSET = 1e-4  # below this d/sigma the central chi-square formula is used
_GRAD_FLOOR = 1e-12  # gradients this small are round-off of an already optimal path


def _pdf(x):
    return np.exp(-0.5 * x * x) / _SQRT_2PI


def sphere_capture_probability(distance, sigma, radius):
    """P(|X - p| <= radius) for X ~ N(mu, sigma^2 I_3) and |mu - p| = distance.

    Closed form of the noncentral chi-square (3 dof) CDF evaluated at ``(radius/sigma)^2``.
    """
    d = np.abs(np.asarray(distance, dtype=np.float64))
    s = np.asarray(sigma, dtype=np.float64)
    r = np.asarray(radius, dtype=np.float64)
    d, s, r = np.broadcast_arrays(d, s, r)
    a = (r - d) / s
    b = (r + d) / s
    delta = d / s
    with np.errstate(divide="ignore", invalid="ignore"):
        general = ndtr(a) + ndtr(b) - 1.0 - (_pdf(a) - _pdf(b)) / delta
    rs = r / s
    central = (ndtr(rs) - ndtr(-rs)) - 2.0 * rs * _pdf(rs)
    out = np.where(delta < _SMALL_OFFSET, central, general)
    return np.clip(out, 0.0, 1.0)


# ---------------------------------------------------------------------------
# Field
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class UncertaintyField:
    """Per-frame joint Gaussians: ``means`` (T, J, 3), ``sigma`` (T, J)."""

    means: np.ndarray
    sigma: np.ndarray
    safety_radius: float

    def __post_init__(self):
        means = np.asarray(self.means, dtype=np.float64)
        sigma = np.asarray(self.sigma, dtype=np.float64)
        if means.ndim != 3 or means.shape[2] != 3 or sigma.shape != means.shape[:2]:
            raise ValueError("means must be (T, J, 3) and sigma (T, J)")
        if means.shape[0] < 1:
            raise ValueError("field needs at least one frame")
        if np.any(~(sigma > 0)) or not np.all(np.isfinite(sigma)):
            raise ValueError("field sigmas must be positive and finite")
        if not self.safety_radius > 0:
            raise ValueError("safety radius must be positive")
        object.__setattr__(self, "means", means)
        object.__setattr__(self, "sigma", sigma)

    @property
    def n_frames(self) -> int:
        return self.means.shape[0]

    @classmethod
    def empty(cls, n_frames: int = 1, safety_radius: float = 0.2) -> "UncertaintyField":
        return cls(np.zeros((n_frames, 0, 3)), np.zeros((n_frames, 0)), safety_radius)

    @classmethod
    def static(cls, centers, sigmas, safety_radius: float) -> "UncertaintyField":
        centers = np.asarray(centers, dtype=np.float64).reshape(1, -1, 3)
        sigmas = np.asarray(sigmas, dtype=np.float64).reshape(1, -1)
        return cls(centers, sigmas, safety_radius)

    @classmethod
    def from_prediction(cls, mean_frames, sigma, trust_length: int, safety_radius: float, growth: float = 1.05) -> "UncertaintyField":
        """Frames past ``trust_length`` reuse the last trusted Gaussians with sigma inflated by ``growth`` per step."""
        means = np.array(mean_frames, dtype=np.float64)
        sig = np.array(sigma, dtype=np.float64)
        n = means.shape[0]
        last = max(min(trust_length, n), 1) - 1
        for k in range(last + 1, n):
            means[k] = means[last]
            sig[k] = sig[last] * growth ** (k - last)
        return cls(means, sig, safety_radius)

    def resample(self, n: int) -> "UncertaintyField":
        """Linear interpolation of means and sigmas onto ``n`` evenly spaced steps."""
        if n == self.n_frames or self.n_frames == 1:
            return self
        pos = np.linspace(0.0, self.n_frames - 1, n)
        lo = np.floor(pos).astype(int)
        hi = np.minimum(lo + 1, self.n_frames - 1)
        w = (pos - lo)[:, None]
        means = self.means[lo] * (1 - w[..., None]) + self.means[hi] * w[..., None]
        sigma = self.sigma[lo] * (1 - w) + self.sigma[hi] * w
        return UncertaintyField(means, sigma, self.safety_radius)

    def frame(self, t: int) -> int:
        return int(min(max(t, 0), self.n_frames - 1))


def field_value(field: UncertaintyField, point, t: int) -> float:
    """Max over joints of the probability that the joint is within the safety radius of ``point``."""
    k = field.frame(t)
    if field.means.shape[1] == 0:
        return 0.0
    d = np.linalg.norm(field.means[k] - np.asarray(point, dtype=np.float64), axis=-1)
    return float(sphere_capture_probability(d, field.sigma[k], field.safety_radius).max())


def field_values(field: UncertaintyField, points) -> np.ndarray:
    """Field value of waypoint ``i`` at step ``i`` (steps beyond the field clamp to its last frame)."""
    points = np.asarray(points, dtype=np.float64)
    n = points.shape[0]
    if field.means.shape[1] == 0:
        return np.zeros(n)
    idx = np.minimum(np.arange(n), field.n_frames - 1)
    d = np.linalg.norm(field.means[idx] - points[:, None, :], axis=-1)
    return sphere_capture_probability(d, field.sigma[idx], field.safety_radius).max(axis=1)


# ---------------------------------------------------------------------------
# Objective and optimizer
# ---------------------------------------------------------------------------


@dataclass
class PlanConfig:
    w_obstacle: float = 1.0
    w_smooth: float = 1.0
    w_goal: float = 0.0
    step_size: float = 0.05
    max_iterations: int = 300
    tolerance: float = 1e-7
    safety_radius: float = 0.25
    collision_threshold: float = 0.05
    fd_step: float = 1e-4
    min_step: float = 1e-6
    growth: float = 1.05

    def __post_init__(self):
        if min(self.w_obstacle, self.w_smooth, self.w_goal) < 0:
            raise ValueError("cost weights must be non-negative")
        if not self.step_size > 0:
            raise ValueError("step size must be positive")

    @classmethod
    def from_mapping(cls, values: dict[str, str]) -> "PlanConfig":
        return cls(**{f.name: type(f.default)(values[f.name]) for f in fields(cls) if f.name in values})


@dataclass(frozen=True)
class Trajectory:
    waypoints: np.ndarray  # (T_r, 3)
    pinned_goal: bool = True

    def __post_init__(self):
        w = np.asarray(self.waypoints, dtype=np.float64)
        if w.ndim != 2 or w.shape[1] != 3 or w.shape[0] < 3:
            raise ValueError("a trajectory needs at least 3 waypoints of 3 coordinates")
        object.__setattr__(self, "waypoints", w)

    @classmethod
    def straight_line(cls, start, goal, n: int) -> "Trajectory":
        s, g = np.asarray(start, dtype=np.float64), np.asarray(goal, dtype=np.float64)
        return cls(s + np.linspace(0.0, 1.0, n)[:, None] * (g - s))

    def __len__(self):
        return self.waypoints.shape[0]


@dataclass(frozen=True)
class CostBreakdown:
    total: float
    obstacle: float
    smoothness: float
    goal: float
    per_step: np.ndarray  # weighted contribution attributed to each waypoint


def _local_lengths(w):
    seg = np.linalg.norm(np.diff(w, axis=0), axis=1)
    out = np.zeros(w.shape[0])
    out[:-1] += 0.5 * seg
    out[1:] += 0.5 * seg
    return out


def _second_diff(w):
    return w[2:] - 2.0 * w[1:-1] + w[:-2]


def _obstacle(field, w):
    return float(np.sum(field_values(field, w) * _local_lengths(w)))


def plan_cost(traj: Trajectory, field: UncertaintyField, config: PlanConfig, goal=None) -> CostBreakdown:
    w = traj.waypoints
    field = field.resample(len(traj))
    occ = field_values(field, w) * _local_lengths(w)
    dd = _second_diff(w)
    smooth_terms = np.sum(dd * dd, axis=1)
    goal_term = 0.0
    if goal is not None and not traj.pinned_goal:
        goal_term = float(np.sum((w[-1] - np.asarray(goal)) ** 2))
    per_step = config.w_obstacle * occ
    per_step[1:-1] += config.w_smooth * smooth_terms
    per_step[-1] += config.w_goal * goal_term
    obstacle = float(occ.sum())
    smoothness = float(smooth_terms.sum())
    total = config.w_obstacle * obstacle + config.w_smooth * smoothness + config.w_goal * goal_term
    return CostBreakdown(total, obstacle, smoothness, goal_term, per_step)


def _smoothness_gradient(w):
    dd = _second_diff(w)
    g = np.zeros_like(w)
    g[:-2] += 2.0 * dd
    g[1:-1] -= 4.0 * dd
    g[2:] += 2.0 * dd
    return g


def _obstacle_terms(field, w):
    return field_values(field, w) * _local_lengths(w)


def _obstacle_gradient(field, w, h):
    """Central differences; waypoint ``i`` only touches terms ``i-1..i+1``, so every third
    waypoint is perturbed at once."""
    g = np.zeros_like(w)
    n = w.shape[0]
    for color in range(3):
        idx = np.arange(1 + color, n - 1, 3)
        if idx.size == 0:
            continue
        for c in range(3):
            up, down = w.copy(), w.copy()
            up[idx, c] += h
            down[idx, c] -= h
            diff = _obstacle_terms(field, up) - _obstacle_terms(field, down)
            local = diff[idx - 1] + diff[idx] + diff[idx + 1]
            g[idx, c] = local / (2.0 * h)
    return g


@dataclass
class OptimizeResult:
    trajectory: Trajectory
    costs: list[float]  # cost before the first and after every accepted iteration
    iterations: int


def optimize(traj: Trajectory, field: UncertaintyField, config: PlanConfig) -> OptimizeResult:
    """Backtracking gradient descent on interior waypoints; the endpoints never move."""
    field = field.resample(len(traj))
    w = traj.waypoints.copy()
    cost = plan_cost(Trajectory(w), field, config).total
    costs = [cost]
    it = 0
    while it < config.max_iterations:
        grad = config.w_smooth * _smoothness_gradient(w)
        if config.w_obstacle > 0:
            grad += config.w_obstacle * _obstacle_gradient(field, w, config.fd_step)
        grad[0] = grad[-1] = 0.0
        if np.max(np.abs(grad)) <= _GRAD_FLOOR:
            break
        step = config.step_size
        accepted = False
        while step >= config.min_step:
            cand = w - step * grad
            cand[0], cand[-1] = w[0], w[-1]
            c = plan_cost(Trajectory(cand), field, config).total
            if c < cost:
                accepted = True
                break
            step *= 0.5
        if not accepted:
            break
        improvement = (cost - c) / max(abs(cost), 1e-12)
        w, cost = cand, c
        costs.append(cost)
        it += 1
        if improvement < config.tolerance:
            break
    return OptimizeResult(Trajectory(w, traj.pinned_goal), costs, it)


def collision_probability_profile(traj: Trajectory, field: UncertaintyField) -> tuple[np.ndarray, float]:
    values = field_values(field.resample(len(traj)), traj.waypoints)
    return values, float(values.max())


def canonical_scene():
    """One static Gaussian slightly off the straight start-goal line."""
    start = np.array([0.0, 0.0, 0.0])
    goal = np.array([2.0, 0.0, 0.0])
    field = UncertaintyField.static([[1.0, 0.05, 0.0]], [0.1], safety_radius=0.25)
    return Trajectory.straight_line(start, goal, 40), field


# ---------------------------------------------------------------------------
# Scene files
# ---------------------------------------------------------------------------


@dataclass
class Scene:
    start: np.ndarray
    goal: np.ndarray
    n_waypoints: int
    config: PlanConfig
    obstacles: list[tuple[np.ndarray, float]]


def _vec(text: str, n: int, key: str) -> np.ndarray:
    parts = text.split(",")
    if len(parts) != n:
        raise ValueError(f"{key} needs {n} comma-separated numbers, got {text!r}")
    return np.array([float(p) for p in parts])


_SCENE_ALIASES = {"T_r": "n_waypoints", "r_s": "safety_radius"}


def parse_scene(text: str) -> Scene:
    """Scene record: ``start=x,y,z goal=x,y,z n_waypoints=N obstacle=x,y,z,sigma ...`` plus PlanConfig keys."""
    from .io import parse_key_value_lines

    pairs = parse_key_value_lines(text)
    values = {}
    obstacles = []
    for k, v in pairs:
        k = _SCENE_ALIASES.get(k, k)
        if k == "obstacle":
            o = _vec(v, 4, k)
            if not o[3] > 0:
                raise ValueError("obstacle sigma must be positive")
            obstacles.append((o[:3], float(o[3])))
        else:
            values[k] = v
    for key in ("start", "goal"):
        if key not in values:
            raise ValueError(f"scene is missing {key}")
    known = {f.name for f in fields(PlanConfig)} | {"start", "goal", "n_waypoints"}
    unknown = set(values) - known
    if unknown:
        raise ValueError(f"unknown scene keys {sorted(unknown)}")
    n = int(values.get("n_waypoints", 40))
    if n < 3:
        raise ValueError("n_waypoints must be at least 3")
    return Scene(_vec(values["start"], 3, "start"), _vec(values["goal"], 3, "goal"), n, PlanConfig.from_mapping(values), obstacles)


def plan_csv(result_traj: Trajectory, field: UncertaintyField, config: PlanConfig) -> str:
    values, _ = collision_probability_profile(result_traj, field)
    running = np.cumsum(plan_cost(result_traj, field, config).per_step)
    lines = ["step,x,y,z,field_value,cost_running"]
    for i, (p, f, c) in enumerate(zip(result_traj.waypoints, values, running)):
        lines.append(f"{i},{p[0]:.9g},{p[1]:.9g},{p[2]:.9g},{f:.9g},{c:.9g}")
    return "\n".join(lines) + "\n"
