"""Reverse DDIM sampling from a noise bundle, with the score-norm accumulator.

Along the trajectory the sampler records ``sigma_t^2 * ||s(x_t)||^2`` for every
step, using the same guided score that drives the step; their sum is the
surrogate ``S`` consumed by the alignment loss.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import grad_engine as ge
from .schedule import VarianceSchedule
from .score_model import GuidanceSetting, MixtureScoreModel, guided_score

INITIAL_ONLY = "initial-only"
FULL_TRAJECTORY = "full-trajectory"


class SamplerError(ValueError):
    pass


@dataclass(frozen=True)
class NoiseBundle:
    """The optimization variable: the starting noise and, optionally, the per-step noises.

    ``injected[i]`` is the noise consumed by the i-th reverse step taken, i.e.
    by schedule step ``T - 1 - i``. In initial-only mode ``injected`` is
    ``None`` and each sampling call draws fresh step noises.
    """

    initial: np.ndarray
    injected: np.ndarray | None = None
    mode: str = FULL_TRAJECTORY

    def __post_init__(self) -> None:
        if self.mode not in (INITIAL_ONLY, FULL_TRAJECTORY):
            raise SamplerError(f"unknown noise mode {self.mode!r}")
        if self.mode == FULL_TRAJECTORY and self.injected is None:
            raise SamplerError("full-trajectory bundles must carry injected noises")

    @classmethod
    def draw(cls, rng: np.random.Generator, dimension: int, step_count: int, mode: str = FULL_TRAJECTORY):
        initial = rng.standard_normal(dimension)
        injected = rng.standard_normal((step_count, dimension)) if mode == FULL_TRAJECTORY else None
        return cls(initial, injected, mode)

    @property
    def dimension(self) -> int:
        return np.shape(ge.value_of(self.initial))[-1]

    def vectors(self) -> list[np.ndarray]:
        out = [np.asarray(self.initial)]
        if self.injected is not None:
            out.extend(np.asarray(e) for e in self.injected)
        return out

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "initial": np.asarray(self.initial).tolist(),
            "injected": None if self.injected is None else np.asarray(self.injected).tolist(),
        }


@dataclass(frozen=True)
class TrajectoryRecord:
    states: list  # x_T .. x_0, T + 1 entries
    score_norm_terms: list  # one per step, in the order taken
    surrogate_sum: object
    prompt: str
    schedule_ref: str = ""
    model_ref: str = ""
    injected_used: np.ndarray | None = field(default=None, repr=False)

    @property
    def x0(self):
        return self.states[-1]

    def values(self) -> "TrajectoryRecord":
        """Copy with every traced quantity replaced by its plain value."""
        return TrajectoryRecord(
            [np.asarray(ge.value_of(s)) for s in self.states],
            [float(ge.value_of(v)) if np.ndim(ge.value_of(v)) == 0 else np.asarray(ge.value_of(v)) for v in self.score_norm_terms],
            ge.value_of(self.surrogate_sum) if np.ndim(ge.value_of(self.surrogate_sum)) else float(ge.value_of(self.surrogate_sum)),
            self.prompt,
            self.schedule_ref,
            self.model_ref,
            self.injected_used,
        )

    def to_dict(self) -> dict:
        plain = self.values()
        return {
            "prompt": self.prompt,
            "schedule_ref": self.schedule_ref,
            "model_ref": self.model_ref,
            "states": [np.asarray(s).tolist() for s in plain.states],
            "score_norm_terms": [float(v) for v in plain.score_norm_terms],
            "surrogate_sum": float(plain.surrogate_sum),
        }


def schedule_ref(schedule: VarianceSchedule) -> str:
    return f"T{schedule.step_count}-eta{schedule.eta:g}"


def reverse_step(x_t, t: int, noise, schedule: VarianceSchedule, model: MixtureScoreModel, prompt: str,
                 guidance: GuidanceSetting, score=None):
    """One DDIM step from level ``alpha_bars[t]`` to ``alpha_bars[t-1]``.

    ``score`` may be passed when the caller already evaluated the guided score
    at ``x_t``; with ``eta = 0`` (``sigma_t = 0``) the noise is ignored.
    """
    schedule.check_step(t)
    if score is None:
        score = guided_score(model, prompt, x_t, t, schedule, guidance)
    a, b, sigma = schedule.state_coef[t], schedule.score_coef[t], schedule.sigmas[t]
    if sigma == 0.0 or noise is None:
        return ge.linear_combination([a, b], [x_t, score])
    return ge.linear_combination([a, b, sigma], [x_t, score, noise])


def sample(bundle: NoiseBundle, prompt: str, schedule: VarianceSchedule, model: MixtureScoreModel,
           guidance: GuidanceSetting, rng: np.random.Generator | None = None) -> TrajectoryRecord:
    """Run all T reverse steps from ``bundle.initial``.

    Leading batch axes on ``bundle.initial`` (and on the injected noises) are
    carried through, which the Monte Carlo estimators rely on.
    """
    if bundle.dimension != model.dimension:
        raise SamplerError(f"bundle dimension {bundle.dimension} does not match model dimension {model.dimension}")
    T = schedule.step_count
    x = bundle.initial
    batch_shape = np.shape(ge.value_of(x))
    if bundle.mode == FULL_TRAJECTORY:
        injected = bundle.injected
        if len(injected) != T:
            raise SamplerError(f"bundle carries {len(injected)} injected noises for a {T}-step schedule")
        used = None
    else:
        if rng is None:
            raise SamplerError("initial-only sampling needs an RNG stream for the step noises")
        injected = rng.standard_normal((T,) + batch_shape)
        used = injected

    states = [x]
    terms = []
    for i in range(T):
        t = T - 1 - i
        s = guided_score(model, prompt, x, t, schedule, guidance)
        sig2 = schedule.sigmas[t] ** 2
        terms.append(ge.mul(sig2, ge.sum_squares(s)))
        x = reverse_step(x, t, injected[i], schedule, model, prompt, guidance, score=s)
        states.append(x)
    return TrajectoryRecord(
        states, terms, ge.total(terms), prompt, schedule_ref(schedule), model.name, used
    )


def surrogate_from_states(states, prompt, schedule, model, guidance) -> float:
    """Recompute S from stored states (used to audit a record)."""
    T = schedule.step_count
    total = 0.0
    for i in range(T):
        t = T - 1 - i
        s = guided_score(model, prompt, np.asarray(states[i]), t, schedule, guidance)
        total += schedule.sigmas[t] ** 2 * float(np.sum(s * s))
    return total
