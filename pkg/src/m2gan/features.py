"""Batched feature containers shared by the generator, discriminators and losses."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor


@dataclass
class ProsodicFeatures:
    """Token-level prosody for a padded batch.

    Durations are carried in the log domain (``log_duration``) so that the
    training path stays differentiable; ``frame_durations`` gives frame counts.
    """

    pitch: Tensor  # [B, N]
    energy: Tensor  # [B, N]
    log_duration: Tensor  # [B, N]
    embedding: Tensor  # [B, N, D_pros]
    mask: np.ndarray  # [B, N] bool

    @property
    def lengths(self) -> np.ndarray:
        return self.mask.sum(axis=1)

    def frame_durations(self) -> np.ndarray:
        """Positive integer frame counts (exp, round, clamp >= 1); 0 on padding."""
        d = np.maximum(1, np.rint(np.exp(self.log_duration.data))).astype(np.int64)
        return np.where(self.mask, d, 0)

    def detach(self) -> "ProsodicFeatures":
        return ProsodicFeatures(
            self.pitch.detach(), self.energy.detach(), self.log_duration.detach(), self.embedding.detach(), self.mask
        )

    def channels(self) -> list[Tensor]:
        return [self.pitch, self.energy, self.log_duration, self.embedding]


@dataclass
class AcousticFeatures:
    frames: Tensor  # [B, T, D_mel]
    mask: np.ndarray  # [B, T] bool

    @property
    def lengths(self) -> np.ndarray:
        return self.mask.sum(axis=1)

    def detach(self) -> "AcousticFeatures":
        return AcousticFeatures(self.frames.detach(), self.mask)


@dataclass
class FrameScores:
    """Raw (unbounded) per-position discriminator outputs."""

    scores: Tensor  # [B, T_out]
    mask: np.ndarray  # [B, T_out] bool

    @property
    def lengths(self) -> np.ndarray:
        return self.mask.sum(axis=1)
