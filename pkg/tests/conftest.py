from __future__ import annotations

import numpy as np
import pytest

from noisealign.schedule import build_linear_schedule
from noisealign.score_model import GuidanceSetting, MixtureScoreModel, gaussian_model, ring_model


def affine_oracle(schedule, mean, c):
    """Per-step (A_t, b_t, sigma_t) for a one-component isotropic model, written out by hand.

    The noised component at level a = alpha_bar_t is N(sqrt(a) m, (a c + 1 - a) I), so
    s(x) = -(x - sqrt(a) m) / v and the DDIM mean is A x + b.
    """
    out = []
    T = schedule.step_count
    for i in range(T):
        t = T - 1 - i
        a = schedule.alpha_bars[t]
        v = a * c + 1.0 - a
        k1, k2 = schedule.state_coef[t], schedule.score_coef[t]
        out.append((k1 - k2 / v, k2 * np.sqrt(a) * np.asarray(mean) / v, schedule.sigmas[t]))
    return out


@pytest.fixture
def three_mixture() -> MixtureScoreModel:
    return MixtureScoreModel(
        weights=np.array([0.5, 0.3, 0.2]),
        means=np.array([[2.0, 0.0], [-1.0, 1.5], [0.0, -2.0]]),
        covariance_scales=np.array([0.2, 0.5, 0.1]),
        prompt_table={"a": (0,), "bc": (1, 2)},
        name="three",
    )


@pytest.fixture
def ring() -> MixtureScoreModel:
    return ring_model(5, 3.0, 0.1)


@pytest.fixture
def gauss() -> MixtureScoreModel:
    return gaussian_model([1.0, -0.5], 0.3)


@pytest.fixture
def sched10():
    return build_linear_schedule(10, train_steps=1000)


@pytest.fixture
def plain_guidance():
    return GuidanceSetting(1.0)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
