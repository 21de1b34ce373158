"""AdamW with decoupled weight decay and the warmup/inverse-sqrt learning rate."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


class NonFiniteGradient(FloatingPointError):
    pass


def lr_at(step: int, lr_peak: float, warmup: int) -> float:
    """Noam schedule normalised so the peak ``lr_peak`` is reached at ``step == warmup``.

    ``lr = lr_peak * sqrt(warmup) * min(step^-1/2, step * warmup^-3/2)``; ``step``
    counts from 1 and restarts at every epoch.
    """
    if step < 1:
        raise ValueError(f"lr step counts from 1, got {step}")
    if warmup < 1:
        raise ValueError(f"warmup must be >= 1, got {warmup}")
    return lr_peak * math.sqrt(warmup) * min(step**-0.5, step * warmup**-1.5)


@dataclass
class AdamWState:
    step: int = 0
    exp_avg: dict[str, np.ndarray] = field(default_factory=dict)
    exp_avg_sq: dict[str, np.ndarray] = field(default_factory=dict)


class AdamW:
    def __init__(
        self,
        named_params: list[tuple[str, Tensor]],
        weight_decay: float = 0.01,
        betas: tuple[float, float] = (0.5, 0.9),
        eps: float = 1e-8,
    ):
        self.params = list(named_params)
        self.weight_decay = weight_decay
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.state = AdamWState()
        for name, p in self.params:
            self.state.exp_avg[name] = np.zeros_like(p.data)
            self.state.exp_avg_sq[name] = np.zeros_like(p.data)

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.grad = None

    def step(self, lr: float) -> None:
        for name, p in self.params:
            if p.grad is not None and not np.all(np.isfinite(p.grad)):
                raise NonFiniteGradient(f"non-finite gradient in {name}; step aborted")
        st = self.state
        st.step += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**st.step
        c2 = 1.0 - b2**st.step
        for name, p in self.params:
            if p.grad is None:
                continue
            if self.weight_decay:
                p.data *= 1.0 - lr * self.weight_decay
            g = p.grad.astype(p.dtype, copy=False)
            m = st.exp_avg[name]
            v = st.exp_avg_sq[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            denom = np.sqrt(v / c2) + self.eps
            p.data -= (lr / c1) * m / denom

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {"step": np.array([self.state.step], dtype=np.float64)}
        for name in self.state.exp_avg:
            out[f"m.{name}"] = self.state.exp_avg[name]
            out[f"v.{name}"] = self.state.exp_avg_sq[name]
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        self.state.step = int(arrays["step"][0])
        for name in self.state.exp_avg:
            self.state.exp_avg[name] = np.array(arrays[f"m.{name}"], dtype=self.state.exp_avg[name].dtype)
            self.state.exp_avg_sq[name] = np.array(arrays[f"v.{name}"], dtype=self.state.exp_avg_sq[name].dtype)


def adamw_step(optimizer: AdamW, lr: float) -> None:
    optimizer.step(lr)
