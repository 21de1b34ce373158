"""Generative, adversarial and hinge losses and their weighted totals.

Per-position quantities are reduced by a masked mean over valid positions of
the whole batch, so loss magnitudes do not depend on sequence length and
padded positions contribute nothing.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .features import AcousticFeatures, FrameScores, ProsodicFeatures
from .tensor import Tensor

LOG_COLUMNS = ("step", "stage", "l_ga", "l_gp", "l_aa", "l_ap", "l_da", "l_dp", "lr")


def masked_mean(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    if x.size == 0:
        raise ValueError("mean over an empty set of positions")
    if mask is None:
        return x.mean()
    m = np.asarray(mask, dtype=x.dtype)
    while m.ndim < x.ndim:
        m = m[..., None]
    m = np.broadcast_to(m, x.shape)
    count = float(m.sum())
    if count == 0:
        raise ValueError("mean over an empty set of positions")
    return (x * Tensor(m)).sum() * (1.0 / count)


def _check_same_shape(a: Tensor, b: Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise T.ShapeError(f"{what}: prediction shape {a.shape} != target shape {b.shape}")


def mae(pred: Tensor, truth: Tensor, mask: np.ndarray | None = None) -> Tensor:
    _check_same_shape(pred, truth, "mae")
    return masked_mean((pred - truth).abs(), mask)


def mse(pred: Tensor, truth: Tensor, mask: np.ndarray | None = None) -> Tensor:
    _check_same_shape(pred, truth, "mse")
    return masked_mean((pred - truth).square(), mask)


def gen_acoustic_loss(pred, truth, mask: np.ndarray | None = None) -> Tensor:
    """Mean absolute error between predicted and ground-truth frames."""
    if isinstance(pred, AcousticFeatures):
        mask = pred.mask if mask is None else mask
        pred = pred.frames
    if isinstance(truth, AcousticFeatures):
        truth = truth.frames
    return mae(T.tensor(pred), T.tensor(truth), mask)


def gen_prosodic_loss(pred: ProsodicFeatures, truth: ProsodicFeatures) -> Tensor:
    """Equal-weight average of the per-channel MSEs (pitch, energy, log-duration, embedding)."""
    mask = pred.mask
    parts = [mse(p, t, mask) for p, t in zip(pred.channels(), truth.channels())]
    return (parts[0] + parts[1] + parts[2] + parts[3]) * 0.25


def _scores(s) -> tuple[Tensor, np.ndarray | None]:
    if isinstance(s, FrameScores):
        return s.scores, s.mask
    return T.tensor(s), None


def adv_generator_loss(scores_fake) -> Tensor:
    """Negative mean fake score: the generator is rewarded for raising D(fake)."""
    s, mask = _scores(scores_fake)
    return -masked_mean(s, mask)


def hinge_discriminator_loss(scores_real, scores_fake) -> Tensor:
    """Per-frame conditional hinge: mean(-min(0, real - 1)) + mean(-min(0, -fake - 1))."""
    real, real_mask = _scores(scores_real)
    fake, fake_mask = _scores(scores_fake)
    real_term = -masked_mean(T.min_const(real - 1.0, 0.0), real_mask)
    fake_term = -masked_mean(T.min_const(-fake - 1.0, 0.0), fake_mask)
    return real_term + fake_term


def _finite(name: str, value) -> None:
    v = value.item() if isinstance(value, Tensor) else float(value)
    if not math.isfinite(v):
        raise ValueError(f"loss term {name} is not finite: {v}")


def total_generator_loss(l_ga, l_gp, l_aa, l_ap, lambda_a: float = 0.1):
    """``l_ga + l_gp + lambda_a * (l_aa + l_ap)`` composed in exactly that order."""
    for name, v in (("l_ga", l_ga), ("l_gp", l_gp), ("l_aa", l_aa), ("l_ap", l_ap)):
        _finite(name, v)
    return (l_ga + l_gp) + lambda_a * (l_aa + l_ap)


def total_discriminator_loss(l_da, l_dp):
    for name, v in (("l_da", l_da), ("l_dp", l_dp)):
        _finite(name, v)
    return l_da + l_dp


@dataclass
class LossBundle:
    l_ga: float = 0.0
    l_gp: float = 0.0
    l_aa: float = 0.0
    l_ap: float = 0.0
    l_da: float = 0.0
    l_dp: float = 0.0
    lambda_a: float = 0.1

    @property
    def l_GA_total(self) -> float:
        return total_generator_loss(self.l_ga, self.l_gp, self.l_aa, self.l_ap, self.lambda_a)

    @property
    def l_D_total(self) -> float:
        return total_discriminator_loss(self.l_da, self.l_dp)

    def as_dict(self) -> dict:
        return asdict(self)
