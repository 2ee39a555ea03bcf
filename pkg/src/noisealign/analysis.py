"""Closed-form and Monte Carlo oracles: AR(1) amplification, Gaussian KLs, drift and MMD."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import grad_engine as ge
from .align import transition_drift
from .rng import make_stream
from .sampler import FULL_TRAJECTORY, NoiseBundle, reverse_step, sample
from .schedule import VarianceSchedule
from .score_model import GuidanceSetting, MixtureScoreModel

ESTIMATORS = ("transition", "score")


class AnalysisError(ValueError):
    pass


# -- AR(1) -------------------------------------------------------------------


@dataclass(frozen=True)
class AR1Process:
    """x_{t-1} = theta * x_t + eps_t, eps_t ~ N(0, sigma^2), run for ``steps`` steps from x_T = z."""

    theta: float
    sigma: float = 1.0
    steps: int = 10

    def __post_init__(self) -> None:
        if self.sigma <= 0:
            raise AnalysisError(f"sigma must be positive, got {self.sigma}")
        if self.steps < 1:
            raise AnalysisError(f"steps must be >= 1, got {self.steps}")

    @property
    def unit_root(self) -> bool:
        return abs(self.theta) == 1.0


def ar1_marginal(process: AR1Process, z: float) -> tuple[float, float]:
    """Mean and variance of x_0 given x_T = z."""
    th, s2, T = process.theta, process.sigma**2, process.steps
    if process.unit_root:
        return th**T * z, T * s2
    # expm1 keeps the variance accurate for theta close to 1
    num = math.expm1(2 * T * math.log(abs(th)))
    den = math.expm1(2 * math.log(abs(th)))
    return th**T * z, s2 * num / den


def ar1_kl(process: AR1Process, z1: float, z2: float) -> float:
    """KL between the x_0 laws started at z1 and z2 (equal variances, so symmetric)."""
    th, s2, T = process.theta, process.sigma**2, process.steps
    delta = z1 - z2
    if process.unit_root:
        return delta**2 / (2 * T * s2)
    _, var = ar1_marginal(process, 0.0)
    return (th**T * delta) ** 2 / (2 * var)


def ar1_simulate(process: AR1Process, z: float, n: int, rng: np.random.Generator) -> np.ndarray:
    """n independent chains run step by step; returns the x_0 draws."""
    x = np.full(n, float(z))
    for _ in range(process.steps):
        x = process.theta * x + process.sigma * rng.standard_normal(n)
    return x


@dataclass(frozen=True)
class DriftEstimate:
    value: float
    standard_error: float
    sample_count: int

    @classmethod
    def from_samples(cls, values: np.ndarray) -> "DriftEstimate":
        values = np.asarray(values, dtype=np.float64).ravel()
        n = values.size
        if n < 2:
            raise AnalysisError("need at least two samples for a standard error")
        # np.sum uses pairwise summation, so totals do not depend on accumulation order
        mean = float(np.sum(values) / n)
        se = float(np.sqrt(np.sum((values - mean) ** 2) / (n - 1) / n))
        return cls(mean, se, n)

    def z_score(self, reference: float) -> float:
        if self.standard_error == 0.0:
            return 0.0 if self.value == reference else math.inf
        return abs(self.value - reference) / self.standard_error


def ar1_kl_mc(process: AR1Process, z1: float, z2: float, n: int, rng: np.random.Generator) -> DriftEstimate:
    """Monte Carlo KL: simulate chains from z1, average log p1(x0) - log p2(x0).

    The log-ratio of two equal-variance Gaussians is written as
    (m1 - m2)(2x - m1 - m2) / (2V) so tiny offsets do not cancel.
    """
    m1, var = ar1_marginal(process, z1)
    m2, _ = ar1_marginal(process, z2)
    x = ar1_simulate(process, z1, n, rng)
    return DriftEstimate.from_samples((m1 - m2) * (2.0 * x - m1 - m2) / (2.0 * var))


# -- Gaussian reverse chains -------------------------------------------------------


def _require_single_component(model: MixtureScoreModel) -> None:
    if model.component_count != 1:
        raise AnalysisError(
            f"closed-form trajectory KL needs a one-component model, got {model.component_count} components"
        )


def affine_step_maps(schedule: VarianceSchedule, model: MixtureScoreModel, prompt: str,
                     guidance: GuidanceSetting) -> list[tuple[np.ndarray, np.ndarray, float]]:
    """(J, c, sigma) per reverse step in the order taken, with mean(x) = J x + c.

    The Jacobian is read off by evaluating the (exactly affine) mean map at the
    origin and the unit vectors.
    """
    _require_single_component(model)
    d = model.dimension
    T = schedule.step_count
    maps = []
    for i in range(T):
        t = T - 1 - i
        c = reverse_step(np.zeros(d), t, None, schedule, model, prompt, guidance)
        cols = reverse_step(np.eye(d), t, None, schedule, model, prompt, guidance) - c
        maps.append((cols.T, c, float(schedule.sigmas[t])))
    return maps


def gaussian_trajectory_kl(schedule: VarianceSchedule, model: MixtureScoreModel, z1, z2,
                           guidance: GuidanceSetting, prompt: str = "c0") -> float:
    """KL between the reverse-chain path laws started at z1 and z2 (fresh step noises).

    By the chain rule this is a sum of per-step KLs. Both chains share every
    transition kernel, so only the first step, where the conditioning states
    differ, contributes. Deterministic first steps give an infinite KL
    unless z1 and z2 map to the same mean.
    """
    maps = affine_step_maps(schedule, model, prompt, guidance)
    J, _, sigma = maps[0]
    diff = J @ (np.asarray(z1, dtype=np.float64) - np.asarray(z2, dtype=np.float64))
    num = float(diff @ diff)
    if num == 0.0:
        return 0.0
    if sigma == 0.0:
        return math.inf
    return num / (2.0 * sigma**2)


def gaussian_marginal(schedule: VarianceSchedule, model: MixtureScoreModel, z, guidance: GuidanceSetting,
                      prompt: str = "c0") -> tuple[np.ndarray, np.ndarray]:
    """Mean and covariance of x_0 given x_T = z, by composing the affine steps."""
    maps = affine_step_maps(schedule, model, prompt, guidance)
    d = model.dimension
    mean = np.asarray(z, dtype=np.float64)
    cov = np.zeros((d, d))
    for J, c, sigma in maps:
        mean = J @ mean + c
        cov = J @ cov @ J.T + sigma**2 * np.eye(d)
    return mean, cov


def gaussian_marginal_kl(schedule: VarianceSchedule, model: MixtureScoreModel, z1, z2,
                         guidance: GuidanceSetting, prompt: str = "c0") -> float:
    """Exact KL between the x_0 laws started at z1 and z2 (shared covariance)."""
    m1, cov = gaussian_marginal(schedule, model, z1, guidance, prompt)
    m2, _ = gaussian_marginal(schedule, model, z2, guidance, prompt)
    diff = m1 - m2
    if not np.any(diff):
        return 0.0
    if np.linalg.matrix_rank(cov) < cov.shape[0]:
        return math.inf
    return 0.5 * float(diff @ np.linalg.solve(cov, diff))


# -- Monte Carlo drift ---------------------------------------------------------------


def mc_drift(bundle_z: NoiseBundle, bundle_z0: NoiseBundle, prompt: str, schedule: VarianceSchedule,
             model: MixtureScoreModel, guidance: GuidanceSetting, sample_count: int,
             rng: np.random.Generator | None = None, estimator: str = "transition",
             shards: int = 1) -> DriftEstimate:
    """Monte Carlo estimate of the score-form drift between the paths started at z and z0.

    Only the starting noises are used; every draw gets fresh step noises.

    ``estimator="transition"`` samples paths from z and averages the
    score-form log-likelihood ratio of the first transition,
    ``(||x - mu(z0)||^2 - ||x - mu(z)||^2) / sigma^2``. Its mean is twice
    the path KL.

    ``estimator="score"`` averages ``S0 - S`` over paired samplings that share
    the step noises (common random numbers).

    ``shards`` splits the draws into independently seeded blocks whose
    samples are concatenated in shard order before averaging.
    """
    if sample_count < 2:
        raise AnalysisError("sample_count must be >= 2")
    if estimator not in ESTIMATORS:
        raise AnalysisError(f"unknown estimator {estimator!r}")
    if shards < 1 or shards > sample_count:
        raise AnalysisError("shards must be between 1 and sample_count")
    if rng is None:
        rng = make_stream(0, 0, "mc_drift")
    z = np.asarray(bundle_z.initial, dtype=np.float64)
    z0 = np.asarray(bundle_z0.initial, dtype=np.float64)
    T, d = schedule.step_count, model.dimension
    sizes = [sample_count // shards + (1 if i < sample_count % shards else 0) for i in range(shards)]
    streams = [rng] if shards == 1 else [np.random.Generator(rng.bit_generator.jumped(i + 1)) for i in range(shards)]

    parts = []
    for n, stream in zip(sizes, streams):
        noises = stream.standard_normal((T, n, d))
        start = np.broadcast_to(z, (n, d))
        traj = sample(NoiseBundle(start, noises, FULL_TRAJECTORY), prompt, schedule, model, guidance)
        if estimator == "transition":
            vals = transition_drift(traj.states, z0, schedule, model, prompt, guidance)
        else:
            ref = sample(NoiseBundle(np.broadcast_to(z0, (n, d)), noises, FULL_TRAJECTORY),
                         prompt, schedule, model, guidance)
            vals = ref.surrogate_sum - traj.surrogate_sum
        parts.append(np.asarray(ge.value_of(vals), dtype=np.float64))
    return DriftEstimate.from_samples(np.concatenate(parts))


# -- MMD -------------------------------------------------------------------------------


def _sq_dists(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    d = np.sum(a * a, 1)[:, None] + np.sum(b * b, 1)[None, :] - 2.0 * a @ b.T
    return np.maximum(d, 0.0)


def median_bandwidth(samples_a, samples_b) -> float:
    """Median pairwise distance over the pooled samples (distinct pairs only)."""
    pooled = np.concatenate([np.atleast_2d(samples_a), np.atleast_2d(samples_b)])
    d2 = _sq_dists(pooled, pooled)
    iu = np.triu_indices(len(pooled), k=1)
    h = float(np.sqrt(np.median(d2[iu])))
    if h <= 0.0:
        raise AnalysisError("median pairwise distance is zero; pass an explicit bandwidth")
    return h


def mmd_unbiased(samples_a, samples_b, bandwidth: float) -> float:
    """Unbiased U-statistic for squared MMD with k(x, y) = exp(-||x - y||^2 / (2 h^2)). Can be negative."""
    a = np.atleast_2d(np.asarray(samples_a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(samples_b, dtype=np.float64))
    m, n = len(a), len(b)
    if m < 2 or n < 2:
        raise AnalysisError("each sample set needs at least two points")
    if bandwidth <= 0:
        raise AnalysisError("bandwidth must be positive")
    g = -0.5 / bandwidth**2
    kaa = np.exp(g * _sq_dists(a, a))
    kbb = np.exp(g * _sq_dists(b, b))
    kab = np.exp(g * _sq_dists(a, b))
    saa = (np.sum(kaa) - np.trace(kaa)) / (m * (m - 1))
    sbb = (np.sum(kbb) - np.trace(kbb)) / (n * (n - 1))
    return float(saa + sbb - 2.0 * np.mean(kab))


def mmd_drift(samples_a, samples_b, bandwidth: float | None = None) -> float:
    """Squared MMD between two sample sets, clamped at zero. Bandwidth defaults to the median heuristic."""
    if bandwidth is None:
        bandwidth = median_bandwidth(samples_a, samples_b)
    return max(0.0, mmd_unbiased(samples_a, samples_b, bandwidth))


def mmd_permutation_null(samples_a, samples_b, bandwidth: float, permutations: int,
                         rng: np.random.Generator) -> np.ndarray:
    """Unbiased MMD^2 under random relabelings of the pooled samples."""
    a = np.atleast_2d(samples_a)
    pooled = np.concatenate([a, np.atleast_2d(samples_b)])
    m = len(a)
    out = np.empty(permutations)
    for i in range(permutations):
        idx = rng.permutation(len(pooled))
        out[i] = mmd_unbiased(pooled[idx[:m]], pooled[idx[m:]], bandwidth)
    return out
