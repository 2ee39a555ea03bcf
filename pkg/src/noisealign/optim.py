"""Optimizers acting on lists of numpy arrays (the vectors of a noise bundle)."""

from __future__ import annotations

import numpy as np


class GradientDescent:
    """z <- z - lr * grad."""

    def __init__(self, lr: float) -> None:
        self.lr = lr

    def step(self, params: list[np.ndarray], grads: list[np.ndarray]) -> list[np.ndarray]:
        return [p - self.lr * g for p, g in zip(params, grads)]


class AdamW:
    """Adam with decoupled weight decay.

    m_k = b1 m_{k-1} + (1 - b1) g_k
    v_k = b2 v_{k-1} + (1 - b2) g_k^2
    p_k = p_{k-1} (1 - lr wd) - lr * (m_k / (1 - b1^k)) / (sqrt(v_k / (1 - b2^k)) + eps)
    """

    def __init__(self, lr: float, betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0) -> None:
        if lr <= 0:
            raise ValueError(f"learning rate must be positive, got {lr}")
        if weight_decay < 0:
            raise ValueError(f"weight decay must be nonnegative, got {weight_decay}")
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m: list[np.ndarray] | None = None
        self.v: list[np.ndarray] | None = None

    def step(self, params: list[np.ndarray], grads: list[np.ndarray]) -> list[np.ndarray]:
        if self.m is None:
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        out = []
        for i, (p, g) in enumerate(zip(params, grads)):
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g
            p = p * (1.0 - self.lr * self.weight_decay)
            p = p - self.lr * (self.m[i] / bc1) / (np.sqrt(self.v[i] / bc2) + self.eps)
            out.append(p)
        return out


def make_optimizer(kind: str, lr: float, weight_decay: float = 0.0):
    if kind == "adamw":
        return AdamW(lr, weight_decay=weight_decay)
    if kind == "gd":
        return GradientDescent(lr)
    raise ValueError(f"unknown optimizer {kind!r}")
