"""Scalar rewards r(x0, prompt) over clean samples.

Smooth kinds are registered as differentiable primitives; the quantized and
threshold kinds refuse traced inputs so that gradient-based optimizers fail
loudly and callers switch to the preference-based optimizer.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import grad_engine as ge

DIFFERENTIABLE_KINDS = frozenset({"darkness", "brightness", "target_distance", "hackable_peak"})
ALL_KINDS = DIFFERENTIABLE_KINDS | {"quantized_target", "threshold_step"}


class RewardError(ValueError):
    pass


@dataclass(frozen=True)
class RewardSpec:
    """Reward kind plus parameters.

    ``target`` is x* for the distance-based kinds, ``peak``/``width``/``height``
    describe the hackable bump, ``levels`` is k for quantization and
    ``threshold`` is tau for the step reward.
    """

    kind: str
    target: tuple[float, ...] | None = None
    peak: tuple[float, ...] | None = None
    width: float = 1.0
    height: float = 1.0
    levels: int = 10
    threshold: float = 0.0
    differentiable: bool = field(init=False)

    def __post_init__(self) -> None:
        if self.kind not in ALL_KINDS:
            raise RewardError(f"unknown reward kind {self.kind!r}")
        if self.kind in ("target_distance", "quantized_target", "threshold_step") and self.target is None:
            raise RewardError(f"{self.kind} needs a target point")
        if self.kind == "hackable_peak":
            if self.peak is None:
                raise RewardError("hackable_peak needs a peak location")
            if self.width <= 0 or self.height <= 0:
                raise RewardError("hackable_peak needs positive width and height")
        if self.kind == "quantized_target" and self.levels < 1:
            raise RewardError("quantization levels must be >= 1")
        for name in ("target", "peak"):
            v = getattr(self, name)
            if v is not None:
                object.__setattr__(self, name, tuple(float(a) for a in np.atleast_1d(v)))
        object.__setattr__(self, "differentiable", self.kind in DIFFERENTIABLE_KINDS)

    def to_dict(self) -> dict:
        out = {"kind": self.kind}
        if self.target is not None:
            out["target"] = list(self.target)
        if self.kind == "hackable_peak":
            out.update(peak=list(self.peak), width=self.width, height=self.height)
        if self.kind == "quantized_target":
            out["levels"] = self.levels
        if self.kind == "threshold_step":
            out["threshold"] = self.threshold
        return out


def _check_point(spec: RewardSpec, point, x0) -> np.ndarray:
    p = np.asarray(point)
    if p.shape[-1] != np.shape(ge.value_of(x0))[-1]:
        raise RewardError(f"{spec.kind} parameter has dimension {p.shape[-1]}, sample has {np.shape(ge.value_of(x0))[-1]}")
    return p


def evaluate(spec: RewardSpec, x0, prompt: str | None = None):
    """Reward of a clean sample (or a batch with leading axes).

    The prompt argument is accepted for interface symmetry; none of the toy
    rewards depend on it.
    """
    kind = spec.kind
    if kind == "darkness":
        return -ge.mean_last(x0)
    if kind == "brightness":
        return ge.mean_last(x0)
    if kind == "target_distance":
        return -ge.sum_squares(x0 - _check_point(spec, spec.target, x0))
    if kind == "hackable_peak":
        d2 = ge.sum_squares(x0 - _check_point(spec, spec.peak, x0))
        return spec.height * ge.exp(d2 * (-0.5 / spec.width**2))

    if ge.is_traced(x0):
        raise ge.NonDifferentiableError(
            f"reward {kind!r} has no derivative; use the preference-based optimizer (mira_dpo_optimize)"
        )
    x0 = np.asarray(x0, dtype=np.float64)
    base = -np.sum((x0 - _check_point(spec, spec.target, x0)) ** 2, axis=-1)
    if kind == "quantized_target":
        return np.floor(spec.levels * base) / spec.levels
    if kind == "threshold_step":
        return (base > spec.threshold).astype(np.float64)
    raise RewardError(f"unknown reward kind {kind!r}")


def reward_gradient(spec: RewardSpec, x0: np.ndarray) -> np.ndarray:
    """Analytic gradient of a differentiable reward, used to cross-check the tape."""
    if not spec.differentiable:
        raise ge.NonDifferentiableError(f"reward {spec.kind!r} has no derivative")
    x0 = np.asarray(x0, dtype=np.float64)
    d = x0.shape[-1]
    if spec.kind == "darkness":
        return np.full_like(x0, -1.0 / d)
    if spec.kind == "brightness":
        return np.full_like(x0, 1.0 / d)
    if spec.kind == "target_distance":
        return -2.0 * (x0 - np.asarray(spec.target))
    diff = x0 - np.asarray(spec.peak)
    r = spec.height * np.exp(-0.5 * np.sum(diff**2, axis=-1, keepdims=True) / spec.width**2)
    return -r * diff / spec.width**2
