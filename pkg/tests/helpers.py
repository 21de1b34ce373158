"""Shared test utilities: central-difference gradient oracle and small fixtures."""

from __future__ import annotations

import numpy as np

from m2gan.nn import Module
from m2gan.tensor import Tensor

FD_STEP = 1e-4
FD_RTOL = 1e-4


def to_float64(*modules: Module) -> None:
    """Promote every parameter of ``modules`` to float64 for gradient checks."""
    for m in modules:
        for _, p in m.named_parameters():
            p.data = p.data.astype(np.float64)


def leaf(rng: np.random.Generator, *shape, scale: float = 1.0, away_from_zero: float = 0.0) -> Tensor:
    x = rng.normal(0.0, scale, size=shape)
    if away_from_zero:
        x = np.sign(x) * (np.abs(x) + away_from_zero)
    return Tensor(x, requires_grad=True)


def finite_difference(loss_fn, t: Tensor, max_entries: int | None = 24, rng=None) -> tuple[np.ndarray, np.ndarray]:
    """Central differences of ``loss_fn()`` with respect to (a sample of) ``t``'s entries."""
    flat = t.data.reshape(-1)
    idx = np.arange(flat.size)
    if max_entries is not None and flat.size > max_entries:
        idx = (rng or np.random.default_rng(0)).choice(flat.size, max_entries, replace=False)
    fd = np.empty(len(idx))
    for n, i in enumerate(idx):
        orig = flat[i]
        flat[i] = orig + FD_STEP
        up = float(loss_fn().data)
        flat[i] = orig - FD_STEP
        down = float(loss_fn().data)
        flat[i] = orig
        fd[n] = (up - down) / (2 * FD_STEP)
    return idx, fd


def gradcheck(loss_fn, tensors, max_entries: int | None = 24, rng=None) -> float:
    """Compare autodiff with central differences; return the worst scaled error.

    Error per entry is ``|auto - fd| / max(1, |fd|)``.
    """
    for t in tensors:
        t.grad = None
    loss = loss_fn()
    loss.backward()
    worst = 0.0
    for t in tensors:
        auto = np.zeros_like(t.data) if t.grad is None else t.grad
        auto = np.array(auto, dtype=np.float64).reshape(-1)
        idx, fd = finite_difference(loss_fn, t, max_entries, rng)
        err = np.abs(auto[idx] - fd) / np.maximum(1.0, np.abs(fd))
        worst = max(worst, float(err.max()))
    return worst


def weighted_sum(y: Tensor, rng: np.random.Generator) -> Tensor:
    """Reduce ``y`` to a scalar with fixed random weights (exercises every output entry)."""
    w = rng.normal(size=y.shape)
    return (y * Tensor(w)).sum()
