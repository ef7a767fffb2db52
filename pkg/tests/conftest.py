import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from bayesmotion.data import MotionSequence, WindowPair
from bayesmotion.model import init_params

settings.register_profile("default", deadline=None, max_examples=60, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

_ACCEPTANCE: dict[int, tuple[bool, str]] = {}


@pytest.fixture
def record_criterion():
    """Store one acceptance verdict; the terminal summary prints them in order."""

    def _record(number: int, passed: bool, detail: str) -> None:
        _ACCEPTANCE[number] = (bool(passed), detail)

    return _record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_ACCEPTANCE):
        ok, detail = _ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")


def random_walk(rng, n_frames, n_joints, step=0.05, rate=25.0, label="rand"):
    frames = np.cumsum(rng.normal(0.0, step, size=(n_frames, n_joints, 3)), axis=0)
    return MotionSequence(frames, rate, label)


def tiny_window(rng, t_p=4, t_f=3, n_joints=2):
    seq = random_walk(rng, t_p + t_f, n_joints, step=0.3)
    return WindowPair(seq.slice(0, t_p), seq.slice(t_p, t_p + t_f), 0)


def tiny_params(rng, n_joints=2, hidden=4, dropout=0.5, scale=0.5):
    """Tiny model with weights ~ N(0, scale) so every path carries gradient."""
    p = init_params(n_joints, hidden, dropout, seed=int(rng.integers(1 << 30)), t_p=4, t_f=3)
    w = {k: rng.normal(0.0, scale, size=v.shape) for k, v in p.weights.items()}
    return p.with_weights(w)
