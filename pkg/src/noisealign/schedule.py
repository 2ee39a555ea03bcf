"""Discrete variance-preserving schedules and the DDIM step coefficients derived from them."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class ScheduleError(ValueError):
    """Raised for out-of-range schedule parameters or step indices."""


@dataclass(frozen=True)
class VarianceSchedule:
    """Per-step coefficients for a T-step reverse process.

    Index ``t`` runs over ``0..T-1``. Step ``t`` maps a state at noise level
    ``alpha_bars[t]`` to level ``alpha_bars[t-1]`` (clean data for ``t = 0``).
    ``sigmas[t]`` is the noise scale injected by that step.
    """

    step_count: int
    betas: np.ndarray
    eta: float = 1.0
    alphas: np.ndarray = field(init=False, repr=False)
    alpha_bars: np.ndarray = field(init=False, repr=False)
    alpha_bars_prev: np.ndarray = field(init=False, repr=False)
    sigmas: np.ndarray = field(init=False, repr=False)
    # x_{t-1} = state_coef[t] * x_t + score_coef[t] * s(x_t) + sigmas[t] * noise
    state_coef: np.ndarray = field(init=False, repr=False)
    score_coef: np.ndarray = field(init=False, repr=False)

    def __post_init__(self) -> None:
        betas = np.asarray(self.betas, dtype=np.float64)
        if betas.shape != (self.step_count,):
            raise ScheduleError(f"expected {self.step_count} betas, got shape {betas.shape}")
        if not np.all((betas > 0) & (betas < 1)):
            raise ScheduleError("betas must lie strictly inside (0, 1)")
        if not 0.0 <= self.eta <= 1.0:
            raise ScheduleError(f"eta must be in [0, 1], got {self.eta}")
        alphas = 1.0 - betas
        alpha_bars = np.cumprod(alphas)
        prev = np.concatenate([[1.0], alpha_bars[:-1]])
        posterior_var = (1.0 - prev) / (1.0 - alpha_bars) * (1.0 - alpha_bars / prev)
        sigmas = self.eta * np.sqrt(np.maximum(posterior_var, 0.0))
        dir_coef = np.sqrt(np.maximum(1.0 - prev - sigmas**2, 0.0))
        sqrt_ab = np.sqrt(alpha_bars)
        sqrt_prev = np.sqrt(prev)
        state_coef = sqrt_prev / sqrt_ab
        score_coef = sqrt_prev * (1.0 - alpha_bars) / sqrt_ab - dir_coef * np.sqrt(1.0 - alpha_bars)

        betas.setflags(write=False)
        for name, arr in [
            ("betas", betas),
            ("alphas", alphas),
            ("alpha_bars", alpha_bars),
            ("alpha_bars_prev", prev),
            ("sigmas", sigmas),
            ("state_coef", state_coef),
            ("score_coef", score_coef),
        ]:
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    def check_step(self, t: int) -> None:
        if not 0 <= t < self.step_count:
            raise ScheduleError(f"step {t} out of range for a {self.step_count}-step schedule")

    def to_dict(self) -> dict:
        return {"step_count": self.step_count, "eta": self.eta, "betas": self.betas.tolist()}


def build_linear_schedule(
    step_count: int,
    beta_start: float = 1e-4,
    beta_end: float = 0.02,
    eta: float = 1.0,
    train_steps: int | None = None,
) -> VarianceSchedule:
    """Linear-beta schedule.

    With ``train_steps`` set, the betas are interpolated over ``train_steps``
    fine steps and ``step_count`` uniformly spaced timesteps are taken from
    that chain (DDIM respacing); the coarse betas are recovered from the
    ratios of the retained cumulative products. Without it the schedule
    itself has ``step_count`` linearly spaced betas.
    """
    if step_count < 1:
        raise ScheduleError(f"step_count must be >= 1, got {step_count}")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ScheduleError(f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})")
    if train_steps is None:
        if step_count == 1:
            betas = np.array([beta_start])
        else:
            betas = np.linspace(beta_start, beta_end, step_count)
        return VarianceSchedule(step_count, betas, eta)

    if train_steps < step_count:
        raise ScheduleError(f"train_steps ({train_steps}) must be >= step_count ({step_count})")
    fine = np.linspace(beta_start, beta_end, train_steps)
    fine_bars = np.cumprod(1.0 - fine)
    keep = np.round(np.arange(1, step_count + 1) * train_steps / step_count).astype(int) - 1
    kept = fine_bars[keep]
    prev = np.concatenate([[1.0], kept[:-1]])
    betas = 1.0 - kept / prev
    return VarianceSchedule(step_count, betas, eta)
