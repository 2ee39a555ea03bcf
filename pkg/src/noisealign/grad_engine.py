"""Reverse-mode differentiation over a small set of registered primitives.

Values flowing through a loss program are either plain numpy arrays/floats
or :class:`Var` nodes recorded on a :class:`Tape`. Every primitive has a
fast path for untraced inputs, so the same sampler and reward code serves
both plain evaluation and differentiation.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Any, Callable

import numpy as np


class NonDifferentiableError(TypeError):
    """A traced value reached a primitive that has no registered derivative."""


class Tape:
    def __init__(self) -> None:
        self.nodes: list[Var] = []

    def backward(self, out: Var) -> None:
        if out.tape is not self:
            raise ValueError("output was not recorded on this tape")
        out.grad = np.ones_like(out.value, dtype=np.float64)
        for node in reversed(self.nodes[: out.index + 1]):
            if node.grad is None:
                continue
            for parent, vjp in node.parents:
                contrib = vjp(node.grad)
                if parent.grad is None:
                    parent.grad = np.array(contrib, dtype=np.float64, copy=True)
                else:
                    parent.grad = parent.grad + contrib


class Var:
    __slots__ = ("value", "parents", "grad", "tape", "index")
    __array_priority__ = 100.0

    def __init__(self, value, tape: Tape, parents=()) -> None:
        self.value = np.asarray(value, dtype=np.float64)
        self.parents = parents
        self.grad = None
        self.tape = tape
        self.index = len(tape.nodes)
        tape.nodes.append(self)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(other))

    def __rsub__(self, other):
        return add(other, neg(self))

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Var):
            raise NonDifferentiableError("division by a traced value is not a registered primitive")
        return mul(self, 1.0 / other)

    def __float__(self) -> float:
        return float(self.value)

    def __repr__(self) -> str:
        return f"Var({self.value!r})"


def is_traced(*xs: Any) -> bool:
    return any(isinstance(x, Var) for x in xs)


def value_of(x):
    return x.value if isinstance(x, Var) else x


def _tape_of(*xs) -> Tape:
    for x in xs:
        if isinstance(x, Var):
            return x.tape
    raise ValueError("no traced input")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    g = np.asarray(g)
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def make_node(value, inputs_and_vjps) -> Var:
    """Record a primitive result. ``inputs_and_vjps`` pairs each input with its VJP."""
    parents = tuple((x, f) for x, f in inputs_and_vjps if isinstance(x, Var))
    return Var(value, _tape_of(*[x for x, _ in inputs_and_vjps]), parents)


# -- arithmetic primitives ---------------------------------------------------


def add(a, b):
    out = value_of(a) + value_of(b)
    if not is_traced(a, b):
        return out
    sa, sb = np.shape(value_of(a)), np.shape(value_of(b))
    return make_node(out, [(a, lambda g: _unbroadcast(g, sa)), (b, lambda g: _unbroadcast(g, sb))])


def neg(a):
    if not is_traced(a):
        return -a
    return make_node(-a.value, [(a, lambda g: -g)])


def mul(a, b):
    va, vb = value_of(a), value_of(b)
    out = va * vb
    if not is_traced(a, b):
        return out
    sa, sb = np.shape(va), np.shape(vb)
    return make_node(
        out,
        [(a, lambda g: _unbroadcast(g * vb, sa)), (b, lambda g: _unbroadcast(g * va, sb))],
    )


def linear_combination(coefs, xs):
    """sum_i coefs[i] * xs[i] with constant scalar coefficients, as one node."""
    vals = [value_of(x) for x in xs]
    out = coefs[0] * vals[0]
    for c, v in zip(coefs[1:], vals[1:]):
        out = out + c * v
    if not is_traced(*xs):
        return out
    pairs = []
    for c, x in zip(coefs, xs):
        shape = np.shape(value_of(x))
        pairs.append((x, lambda g, c=c, shape=shape: _unbroadcast(c * g, shape)))
    return make_node(out, pairs)


def sum_squares(x):
    """Squared Euclidean norm over the last axis."""
    v = value_of(x)
    out = np.sum(v * v, axis=-1)
    if not is_traced(x):
        return out
    return make_node(out, [(x, lambda g: 2.0 * np.expand_dims(g, -1) * v)])


def mean_last(x):
    v = value_of(x)
    out = np.mean(v, axis=-1)
    if not is_traced(x):
        return out
    n = v.shape[-1]
    return make_node(out, [(x, lambda g: np.broadcast_to(np.expand_dims(g, -1) / n, v.shape))])


def total(xs):
    """Sum of a list of equally shaped values, recorded as a single node."""
    vals = [value_of(x) for x in xs]
    out = np.sum(vals, axis=0) if vals else 0.0
    if not is_traced(*xs):
        return out
    return make_node(out, [(x, lambda g: g) for x in xs])


def square(x):
    v = value_of(x)
    if not is_traced(x):
        return v * v
    return make_node(v * v, [(x, lambda g: 2.0 * g * v)])


def relu(x):
    v = value_of(x)
    out = np.maximum(v, 0.0)
    if not is_traced(x):
        return out
    return make_node(out, [(x, lambda g: g * (v > 0))])


def absolute(x):
    v = value_of(x)
    out = np.abs(v)
    if not is_traced(x):
        return out
    return make_node(out, [(x, lambda g: g * np.sign(v))])


def exp(x):
    v = value_of(x)
    out = np.exp(v)
    if not is_traced(x):
        return out
    return make_node(out, [(x, lambda g: g * out)])


def softplus(x):
    """log(1 + e^x), overflow-safe."""
    v = value_of(x)
    out = np.logaddexp(0.0, v)
    if not is_traced(x):
        return out
    sig = 0.5 * (1.0 + np.tanh(0.5 * v))
    return make_node(out, [(x, lambda g: g * sig)])


# -- gradients of noise bundles ------------------------------------------------


@dataclass(frozen=True)
class GradientResult:
    value: float
    wrt_initial: np.ndarray
    wrt_injected: np.ndarray | None

    def flat(self) -> np.ndarray:
        parts = [self.wrt_initial.ravel()]
        if self.wrt_injected is not None:
            parts.append(self.wrt_injected.ravel())
        return np.concatenate(parts)

    def norm(self) -> float:
        return float(np.linalg.norm(self.flat()))


def gradient(loss_program: Callable[[Any], Any], bundle) -> GradientResult:
    """Reverse-mode gradient of ``loss_program(bundle)`` with respect to the bundle's noises.

    Injected noises are differentiated only when the bundle carries them
    (full-trajectory mode); otherwise they are whatever the program draws
    and are held fixed.
    """
    return gradient_multi(lambda bs: loss_program(bs[0]), [bundle])[0]


def gradient_multi(loss_program: Callable[[list], Any], bundles: list) -> list[GradientResult]:
    """Like :func:`gradient` for a loss of several bundles at once (one tape)."""
    tape = Tape()
    leaves = []
    traced = []
    for bundle in bundles:
        z = Var(np.array(bundle.initial, dtype=np.float64), tape)
        eps = None
        if bundle.injected is not None:
            eps = [Var(np.array(e, dtype=np.float64), tape) for e in bundle.injected]
        leaves.append((z, eps))
        traced.append(replace(bundle, initial=z, injected=eps))
    out = loss_program(traced)
    if isinstance(out, Var):
        if out.value.shape != ():
            raise ValueError(f"loss program must return a scalar, got shape {out.value.shape}")
        tape.backward(out)
    value = float(value_of(out))

    def grad_of(v: Var) -> np.ndarray:
        return np.zeros_like(v.value) if v.grad is None else np.asarray(v.grad, dtype=np.float64)

    results = []
    for z, eps in leaves:
        wrt_inj = None if eps is None else np.stack([grad_of(e) for e in eps])
        res = GradientResult(value, grad_of(z), wrt_inj)
        if not np.all(np.isfinite(res.flat())):
            raise FloatingPointError("non-finite gradient")
        results.append(res)
    return results


@dataclass(frozen=True)
class FDReport:
    max_rel_error: float
    mean_rel_error: float
    coordinates: int
    step: float
    noise_regime: bool

    def passed(self, tol: float) -> bool:
        return self.max_rel_error < tol

    def summary(self) -> str:
        flag = "  [step in numerical-noise regime]" if self.noise_regime else ""
        return (
            f"coords={self.coordinates} step={self.step:g} "
            f"max_rel_err={self.max_rel_error:.3e} mean_rel_err={self.mean_rel_error:.3e}{flag}"
        )


def finite_difference_check(loss_program, bundle, step: float = 1e-5) -> FDReport:
    """Compare reverse-mode gradients with central differences on every coordinate.

    Relative error per coordinate is ``|g - fd| / max(|g|, |fd|, floor)`` with
    a small absolute floor so exactly-zero derivatives do not divide by zero.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    res = gradient(loss_program, bundle)
    analytic = res.flat()

    def evaluate(flat: np.ndarray) -> float:
        return float(loss_program(_unflatten(bundle, flat)))

    x0 = _flatten(bundle)
    fd = np.empty_like(x0)
    for i in range(x0.size):
        xp = x0.copy()
        xm = x0.copy()
        xp[i] += step
        xm[i] -= step
        fd[i] = (evaluate(xp) - evaluate(xm)) / (2.0 * step)
    scale = max(1.0, float(np.max(np.abs(analytic))))
    floor = 1e-8 * scale
    rel = np.abs(analytic - fd) / np.maximum(np.maximum(np.abs(analytic), np.abs(fd)), floor)
    # central differences lose ~eps/step relative accuracy to cancellation
    noise_regime = step < 1e-7
    return FDReport(float(rel.max()), float(rel.mean()), int(x0.size), step, noise_regime)


def _flatten(bundle) -> np.ndarray:
    parts = [np.asarray(bundle.initial, dtype=np.float64).ravel()]
    if bundle.injected is not None:
        parts.append(np.asarray(bundle.injected, dtype=np.float64).ravel())
    return np.concatenate(parts)


def _unflatten(bundle, flat: np.ndarray):
    init = np.asarray(bundle.initial)
    n = init.size
    new_init = flat[:n].reshape(init.shape)
    new_inj = None
    if bundle.injected is not None:
        inj = np.asarray(bundle.injected)
        new_inj = flat[n:].reshape(inj.shape)
    return replace(bundle, initial=new_init, injected=new_inj)
