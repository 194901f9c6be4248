"""Adam and learning-rate schedules acting in place on leaf tensors."""

from __future__ import annotations

import math

import numpy as np

from .numerics import Tensor


def cosine_lr(base: float, step: int, total: int) -> float:
    """Cosine annealing without warm-up, reaching zero on the final step."""
    if total <= 1:
        return base
    progress = min(step, total - 1) / (total - 1)
    return base * 0.5 * (1.0 + math.cos(math.pi * progress))


def schedule_lr(kind: str, base: float, step: int, total: int) -> float:
    if kind == "constant":
        return base
    if kind == "cosine":
        return cosine_lr(base, step, total)
    raise ValueError(f"unknown lr schedule {kind!r}")


class Adam:
    def __init__(self, params: list[Tensor], lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self, grads, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            g = g.data if isinstance(g, Tensor) else g
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = (lr / c1) * m / (np.sqrt(v / c2) + self.eps)
            p.data -= update.astype(p.dtype)

    def state(self) -> dict[str, np.ndarray]:
        out = {"t": np.array([self.t], dtype=np.int64)}
        for i, (m, v) in enumerate(zip(self.m, self.v)):
            out[f"m{i}"] = m
            out[f"v{i}"] = v
        return out


class RowAdam:
    """Adam over rows of a table where only the rows in a batch are touched.

    Each row keeps its own step count, so rows that are rarely sampled are not
    moved by stale momentum.
    """

    def __init__(self, table: Tensor, lr: float, betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.0):
        self.table = table
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = np.zeros(table.shape[0], dtype=np.int64)
        self.m = np.zeros_like(table.data)
        self.v = np.zeros_like(table.data)

    def step(self, rows, grad_rows: np.ndarray, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        rows = np.asarray(rows)
        g = grad_rows + self.weight_decay * self.table.data[rows]
        self.t[rows] += 1
        t = self.t[rows][:, None]
        self.m[rows] = self.beta1 * self.m[rows] + (1.0 - self.beta1) * g
        self.v[rows] = self.beta2 * self.v[rows] + (1.0 - self.beta2) * g * g
        mhat = self.m[rows] / (1.0 - self.beta1**t)
        vhat = self.v[rows] / (1.0 - self.beta2**t)
        self.table.data[rows] -= (lr * mhat / (np.sqrt(vhat) + self.eps)).astype(self.table.dtype)
