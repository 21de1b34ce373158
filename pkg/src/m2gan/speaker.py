"""Frozen toy speaker encoder.

Stands in for a pretrained speaker-identification encoder: every speaker id
maps to a fixed unit vector derived from a seeded hash, so the embedding can
never drift during training.
"""

from __future__ import annotations

import numpy as np

SPEAKER_DIM = 64
_SALT = 0x5EED_5BC7


def speaker_embed(speaker_id: int, dim: int = SPEAKER_DIM) -> np.ndarray:
    if speaker_id < 0:
        raise ValueError(f"speaker id must be non-negative, got {speaker_id}")
    rng = np.random.default_rng([_SALT, int(speaker_id), dim])
    v = rng.standard_normal(dim)
    return (v / np.linalg.norm(v)).astype(np.float32)


def speaker_embed_batch(speaker_ids, dim: int = SPEAKER_DIM) -> np.ndarray:
    return np.stack([speaker_embed(int(s), dim) for s in speaker_ids])
