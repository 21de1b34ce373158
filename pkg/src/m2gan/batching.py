"""Padded batches and the length-bucketed frame-budget sampler."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .corpus import UtteranceRecord
from .speaker import speaker_embed_batch

log = logging.getLogger(__name__)


@dataclass
class Batch:
    utterance_ids: list[str]
    speaker_ids: np.ndarray  # [B]
    speaker_emb: np.ndarray  # [B, D_spk] float32
    tokens: np.ndarray  # [B, N] int64, 0 on padding
    token_mask: np.ndarray  # [B, N] bool
    durations: np.ndarray  # [B, N] int64, 0 on padding
    pitch: np.ndarray  # [B, N] float32
    energy: np.ndarray  # [B, N] float32
    frames: np.ndarray  # [B, T, D_mel] float32
    frame_mask: np.ndarray  # [B, T] bool

    def __len__(self) -> int:
        return len(self.utterance_ids)

    @property
    def padded_frames(self) -> int:
        return int(self.frame_mask.size)

    @property
    def real_frames(self) -> int:
        return int(self.frame_mask.sum())


def collate(records: Sequence[UtteranceRecord], d_spk: int = 64) -> Batch:
    b = len(records)
    n_max = max(r.n_tokens for r in records)
    t_max = max(r.n_frames for r in records)
    d_mel = records[0].frames.shape[1]
    tokens = np.zeros((b, n_max), dtype=np.int64)
    durations = np.zeros((b, n_max), dtype=np.int64)
    pitch = np.zeros((b, n_max), dtype=np.float32)
    energy = np.zeros((b, n_max), dtype=np.float32)
    frames = np.zeros((b, t_max, d_mel), dtype=np.float32)
    token_mask = np.zeros((b, n_max), dtype=bool)
    frame_mask = np.zeros((b, t_max), dtype=bool)
    for i, r in enumerate(records):
        n, t = r.n_tokens, r.n_frames
        tokens[i, :n] = r.token_ids
        durations[i, :n] = r.durations
        pitch[i, :n] = r.pitch
        energy[i, :n] = r.energy
        frames[i, :t] = r.frames
        token_mask[i, :n] = True
        frame_mask[i, :t] = True
    speaker_ids = np.array([r.speaker_id for r in records], dtype=np.int64)
    return Batch(
        utterance_ids=[r.utterance_id for r in records],
        speaker_ids=speaker_ids,
        speaker_emb=speaker_embed_batch(speaker_ids, d_spk),
        tokens=tokens,
        token_mask=token_mask,
        durations=durations,
        pitch=pitch,
        energy=energy,
        frames=frames,
        frame_mask=frame_mask,
    )


def make_batches(lengths: Sequence[int], max_frames: int, rng: np.random.Generator | None = None) -> list[list[int]]:
    """Group indices of similar length so each padded batch holds <= ``max_frames`` frames.

    Indices are shuffled (when ``rng`` is given) and then stably sorted by
    length, so equal-length items change company between epochs. Batches are
    filled greedily in length order; the padded cost of a batch is
    ``len(batch) * longest``. An item longer than the budget is emitted alone
    with a warning. Batch order is shuffled with ``rng``.
    """
    lengths = np.asarray(lengths)
    if lengths.size == 0:
        raise ValueError("cannot batch an empty corpus")
    order = np.arange(len(lengths))
    if rng is not None:
        order = rng.permutation(order)
    order = order[np.argsort(lengths[order], kind="stable")]
    batches: list[list[int]] = []
    current: list[int] = []
    longest = 0
    for idx in order:
        n = int(lengths[idx])
        if n > max_frames:
            log.warning("utterance %d has %d frames, over the %d-frame budget; batching it alone", idx, n, max_frames)
            batches.append([int(idx)])
            continue
        new_longest = max(longest, n)
        if current and new_longest * (len(current) + 1) > max_frames:
            batches.append(current)
            current, new_longest = [], n
        current.append(int(idx))
        longest = new_longest
    if current:
        batches.append(current)
    if rng is not None:
        perm = rng.permutation(len(batches))
        batches = [batches[i] for i in perm]
    return batches


def padding_waste(batches: list[list[int]], lengths: Sequence[int]) -> float:
    """Fraction of padded frame slots that hold padding."""
    lengths = np.asarray(lengths)
    padded = sum(len(b) * int(lengths[b].max()) for b in batches)
    real = sum(int(lengths[b].sum()) for b in batches)
    return (padded - real) / padded
