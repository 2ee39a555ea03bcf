"""Analytic Gaussian-mixture backbone: exact noised densities and scores.

Each component k is N(m_k, c_k I). Under the variance-preserving forward
kernel ``x_t = sqrt(abar_t) x_0 + sqrt(1 - abar_t) eps`` it becomes
N(sqrt(abar_t) m_k, (abar_t c_k + 1 - abar_t) I), so the noised mixture,
its score and its Hessian are all closed form.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy.special import logsumexp

from .grad_engine import is_traced, make_node, value_of
from .schedule import VarianceSchedule

UNCONDITIONAL = "uncond"


class ModelError(ValueError):
    pass


class UnknownPromptError(ModelError, KeyError):
    pass


@dataclass(frozen=True)
class GuidanceSetting:
    weight: float = 1.0

    def __post_init__(self) -> None:
        if self.weight < 0:
            raise ModelError(f"guidance weight must be nonnegative, got {self.weight}")


@dataclass(frozen=True)
class MixtureScoreModel:
    weights: np.ndarray
    means: np.ndarray  # (K, d)
    covariance_scales: np.ndarray  # (K,)
    prompt_table: Mapping[str, tuple[int, ...]] = field(default_factory=dict)
    name: str = "mixture"

    def __post_init__(self) -> None:
        w = np.asarray(self.weights, dtype=np.float64)
        m = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        c = np.asarray(self.covariance_scales, dtype=np.float64)
        if m.ndim != 2 or w.shape != (m.shape[0],) or c.shape != (m.shape[0],):
            raise ModelError("weights, means and covariance_scales disagree on component count")
        if np.any(w <= 0) or abs(w.sum() - 1.0) > 1e-10:
            raise ModelError("weights must be positive and sum to 1")
        if np.any(c <= 0):
            raise ModelError("covariance scales must be positive")
        table = {UNCONDITIONAL: tuple(range(len(w)))}
        for prompt, idx in dict(self.prompt_table).items():
            idx = tuple(int(i) for i in idx)
            if not idx or any(not 0 <= i < len(w) for i in idx):
                raise ModelError(f"prompt {prompt!r} must map to a nonempty set of valid components")
            table[prompt] = idx
        for arr in (w, m, c):
            arr.setflags(write=False)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", m)
        object.__setattr__(self, "covariance_scales", c)
        object.__setattr__(self, "prompt_table", table)

    @property
    def dimension(self) -> int:
        return self.means.shape[1]

    @property
    def component_count(self) -> int:
        return len(self.weights)

    def components_for(self, prompt: str) -> tuple[int, ...]:
        try:
            return self.prompt_table[prompt]
        except KeyError:
            raise UnknownPromptError(f"unknown prompt {prompt!r}") from None

    def data_moments(self, prompt: str = UNCONDITIONAL) -> tuple[np.ndarray, np.ndarray]:
        """Mean and covariance of the clean prompt-conditioned mixture."""
        idx = list(self.components_for(prompt))
        w = self.weights[idx] / self.weights[idx].sum()
        m = self.means[idx]
        mean = w @ m
        centered = m - mean
        cov = np.einsum("k,ki,kj->ij", w, centered, centered)
        cov += np.sum(w * self.covariance_scales[idx]) * np.eye(self.dimension)
        return mean, cov

    def to_dict(self) -> dict:
        return {
            "weights": self.weights.tolist(),
            "means": self.means.tolist(),
            "covariance_scales": self.covariance_scales.tolist(),
            "prompts": {k: list(v) for k, v in self.prompt_table.items()},
        }


def ring_model(
    n_components: int = 5,
    radius: float = 3.0,
    covariance_scale: float = 0.1,
) -> MixtureScoreModel:
    """Equal-weight 2-d mixture on a circle; prompt ``c{k}`` selects component k."""
    angles = 2.0 * np.pi * np.arange(n_components) / n_components
    means = radius * np.stack([np.cos(angles), np.sin(angles)], axis=1)
    prompts = {f"c{k}": (k,) for k in range(n_components)}
    return MixtureScoreModel(
        np.full(n_components, 1.0 / n_components),
        means,
        np.full(n_components, covariance_scale),
        prompts,
        name=f"ring{n_components}",
    )


def gaussian_model(mean: Sequence[float], covariance_scale: float = 1.0) -> MixtureScoreModel:
    mean = np.atleast_1d(np.asarray(mean, dtype=np.float64))
    return MixtureScoreModel(
        np.ones(1), mean[None, :], np.array([covariance_scale]), {"c0": (0,)}, name="gaussian"
    )


# -- closed-form evaluations ---------------------------------------------------


def _noised(model: MixtureScoreModel, prompt: str, t: int, schedule: VarianceSchedule):
    schedule.check_step(t)
    idx = list(model.components_for(prompt))
    abar = schedule.alpha_bars[t]
    logw = np.log(model.weights[idx] / model.weights[idx].sum())
    mu = np.sqrt(abar) * model.means[idx]
    var = abar * model.covariance_scales[idx] + (1.0 - abar)
    return logw, mu, var


def _check_dim(model: MixtureScoreModel, x: np.ndarray) -> None:
    if x.shape[-1] != model.dimension:
        raise ModelError(f"state dimension {x.shape[-1]} does not match model dimension {model.dimension}")


def _component_terms(model, prompt, x, t, schedule):
    """Per-component log joint, responsibilities and component scores. x: (..., d)."""
    logw, mu, var = _noised(model, prompt, t, schedule)
    d = model.dimension
    diff = x[..., None, :] - mu  # (..., K, d)
    sq = np.sum(diff * diff, axis=-1)
    log_joint = logw - 0.5 * d * np.log(2.0 * np.pi * var) - 0.5 * sq / var
    log_norm = logsumexp(log_joint, axis=-1, keepdims=True)
    resp = np.exp(log_joint - log_norm)
    comp_scores = -diff / var[:, None]
    return log_norm[..., 0], resp, comp_scores, var


def log_density(model, prompt, x, t, schedule) -> np.ndarray:
    """log p_t(x | prompt) of the noised, prompt-restricted mixture."""
    x = np.asarray(x, dtype=np.float64)
    _check_dim(model, x)
    return _component_terms(model, prompt, x, t, schedule)[0]


def _score_and_hvp(model, prompt, x, t, schedule):
    _, resp, g, var = _component_terms(model, prompt, x, t, schedule)
    s = np.einsum("...k,...kd->...d", resp, g)

    def hvp(v):
        # H = sum_k r_k (-I / v_k) + sum_k r_k g_k g_k^T - s s^T  (symmetric)
        out = -v * np.sum(resp / var, axis=-1, keepdims=True)
        gv = np.einsum("...kd,...d->...k", g, v)
        out = out + np.einsum("...k,...kd->...d", resp * gv, g)
        out = out - s * np.sum(s * v, axis=-1, keepdims=True)
        return out

    return s, hvp


def marginal_score(model, prompt, x, t, schedule):
    """Exact score of the noised prompt-conditioned mixture; differentiable in x."""
    xv = np.asarray(value_of(x), dtype=np.float64)
    _check_dim(model, xv)
    s, hvp = _score_and_hvp(model, prompt, xv, t, schedule)
    if not is_traced(x):
        return s
    return make_node(s, [(x, hvp)])


def guided_score(model, prompt, x, t, schedule, guidance: GuidanceSetting):
    """(1 - w) * unconditional score + w * prompt-conditional score."""
    xv = np.asarray(value_of(x), dtype=np.float64)
    _check_dim(model, xv)
    w = guidance.weight
    model.components_for(prompt)
    if w == 1.0 or prompt == UNCONDITIONAL:
        return marginal_score(model, prompt, x, t, schedule)
    if w == 0.0:
        return marginal_score(model, UNCONDITIONAL, x, t, schedule)
    su, hu = _score_and_hvp(model, UNCONDITIONAL, xv, t, schedule)
    sc, hc = _score_and_hvp(model, prompt, xv, t, schedule)
    s = (1.0 - w) * su + w * sc
    if not is_traced(x):
        return s
    return make_node(s, [(x, lambda v: (1.0 - w) * hu(v) + w * hc(v))])
