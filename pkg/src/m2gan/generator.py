"""FastSpeech2-lite acoustic model.

text encoder -> variance adaptor (pitch / energy / log-duration / prosody
embedding predictors) -> length regulator -> acoustic decoder, with the frozen
speaker embedding projected into both encoder and decoder.

Two modes:

* ``teacher_forced`` expands with ground-truth durations and conditions the
  decoder on ground-truth pitch, energy and the prosody embedding encoded from
  the ground-truth frames, so predicted and true frame grids align.
* ``inference`` uses the model's own predictions end to end.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from . import tensor as T
from .batching import Batch, collate
from .corpus import UtteranceRecord
from .features import AcousticFeatures, ProsodicFeatures
from .nn import Conv1d, Conv1dSpec, Dropout, LayerNorm, Linear, Module, TransformerSpec
from .speaker import SPEAKER_DIM, speaker_embed
from .tensor import Tensor

MODES = ("teacher_forced", "inference")


@dataclass(frozen=True)
class GeneratorConfig:
    vocab_size: int = 32
    d_hidden: int = 128
    d_mel: int = 20
    d_pros: int = 16
    d_spk: int = SPEAKER_DIM
    encoder_layers: int = 2
    decoder_layers: int = 2
    heads: int = 2
    feedforward_dim: int = 256
    dropout: float = 0.1
    predictor_kernel: int = 3
    prosody_kernel: int = 3
    prosody_encoder_bias: bool = True

    def transformer(self) -> TransformerSpec:
        return TransformerSpec(
            encoder_layers=self.encoder_layers,
            decoder_layers=self.decoder_layers,
            hidden_dim=self.d_hidden,
            feedforward_dim=self.feedforward_dim,
            heads=self.heads,
            dropout=self.dropout,
        )


def alignment_matrix(durations: np.ndarray, n_frames: int | None = None) -> np.ndarray:
    """One-hot ``[B, T, N]`` map from frames to the token they repeat."""
    durations = np.asarray(durations, dtype=np.int64)
    if durations.ndim == 1:
        durations = durations[None]
    if np.any(durations < 0):
        raise ValueError("durations must be non-negative")
    totals = durations.sum(axis=1)
    if np.any(totals < 1):
        raise ValueError("every sequence needs at least one frame (all-zero durations)")
    t_max = int(totals.max()) if n_frames is None else n_frames
    b, n = durations.shape
    align = np.zeros((b, t_max, n), dtype=np.float32)
    for i in range(b):
        owner = np.repeat(np.arange(n), durations[i])
        align[i, np.arange(len(owner)), owner] = 1.0
    return align


def length_regulate(h: Tensor, durations: np.ndarray, n_frames: int | None = None) -> Tensor:
    """Repeat token vector ``i`` ``durations[i]`` times, in order."""
    align = alignment_matrix(durations, n_frames)
    squeeze = h.ndim == 2
    if squeeze:
        h = h.reshape(1, *h.shape)
    out = Tensor(align.astype(h.dtype)) @ h
    return out.reshape(out.shape[1:]) if squeeze else out


class VariancePredictor(Module):
    """Two masked conv layers (ReLU, LayerNorm, dropout) and a linear head."""

    def __init__(self, d_in: int, d_out: int, kernel: int, dropout: float, rng: np.random.Generator):
        self.conv1 = Conv1d(Conv1dSpec(d_in, d_in, kernel), rng)
        self.norm1 = LayerNorm(d_in)
        self.conv2 = Conv1d(Conv1dSpec(d_in, d_in, kernel), rng)
        self.norm2 = LayerNorm(d_in)
        self.drop = Dropout(dropout)
        self.head = Linear(d_in, d_out, rng)

    def __call__(self, h: Tensor, mask: np.ndarray) -> Tensor:
        x = self.drop(self.norm1(T.relu(self.conv1(nn.masked(h, mask)))))
        x = self.drop(self.norm2(T.relu(self.conv2(nn.masked(x, mask)))))
        return self.head(x)


class ProsodyEncoder(Module):
    """Conv stack over reference frames, average-pooled over each token's frames.

    The output is squashed with tanh so the embedding target the predictor
    regresses onto keeps a bounded scale while the encoder trains.
    """

    def __init__(self, cfg: GeneratorConfig, rng: np.random.Generator):
        bias = cfg.prosody_encoder_bias
        self.conv1 = Conv1d(Conv1dSpec(cfg.d_mel, cfg.d_hidden // 2, cfg.prosody_kernel), rng, bias=bias)
        self.conv2 = Conv1d(Conv1dSpec(cfg.d_hidden // 2, cfg.d_pros, cfg.prosody_kernel), rng, bias=bias)

    def __call__(self, frames: Tensor, frame_mask: np.ndarray, durations: np.ndarray) -> Tensor:
        align = alignment_matrix(durations, frames.shape[1])
        totals = align.sum(axis=1)
        if np.any(totals.sum(axis=1) != frame_mask.sum(axis=1)):
            raise ValueError("token alignment does not cover the reference frames")
        x = nn.masked(T.leaky_relu(self.conv1(nn.masked(frames, frame_mask))), frame_mask)
        x = nn.masked(self.conv2(x), frame_mask)
        pool = np.swapaxes(align, 1, 2) / np.maximum(totals, 1)[:, :, None]
        return T.tanh(Tensor(pool.astype(x.dtype)) @ x)


@dataclass
class GeneratorOutput:
    acoustic: AcousticFeatures
    predicted: ProsodicFeatures
    target: ProsodicFeatures | None
    durations: np.ndarray


class AcousticGenerator(Module):
    def __init__(self, cfg: GeneratorConfig, rng: np.random.Generator):
        self.cfg = cfg
        d = cfg.d_hidden
        spec = cfg.transformer()
        # unit-scale token vectors so identity is not swamped by the positional encoding
        self.token_emb = nn.Embedding(cfg.vocab_size, d, rng, std=1.0)
        self.encoder = nn.TransformerEncoder(spec, rng)
        self.enc_spk_proj = Linear(cfg.d_spk, d, rng)
        self.pitch_predictor = VariancePredictor(d, 1, cfg.predictor_kernel, cfg.dropout, rng)
        self.energy_predictor = VariancePredictor(d, 1, cfg.predictor_kernel, cfg.dropout, rng)
        self.duration_predictor = VariancePredictor(d, 1, cfg.predictor_kernel, cfg.dropout, rng)
        self.prosody_predictor = VariancePredictor(d, cfg.d_pros, cfg.predictor_kernel, cfg.dropout, rng)
        self.prosody_encoder = ProsodyEncoder(cfg, rng)
        self.pitch_proj = Linear(1, d, rng)
        self.energy_proj = Linear(1, d, rng)
        self.prosody_proj = Linear(cfg.d_pros, d, rng)
        self.dec_spk_proj = Linear(cfg.d_spk, d, rng)
        self.decoder = nn.TransformerEncoder(spec, rng, num_layers=cfg.decoder_layers)
        self.mel_head = Linear(d, cfg.d_mel, rng)

    # -- stages ----------------------------------------------------------
    def encode_text(self, tokens: np.ndarray, token_mask: np.ndarray, spk_emb: np.ndarray) -> Tensor:
        b, n = tokens.shape
        pe = nn.positional_encoding(n, self.cfg.d_hidden).astype(np.float32)
        x = self.token_emb(tokens) + Tensor(pe)
        bias = nn.attention_bias(token_mask.sum(1), token_mask.sum(1), n, n)
        h = self.encoder(x, bias)
        spk = self.enc_spk_proj(Tensor(spk_emb.astype(np.float32)))
        return nn.masked(h + spk.reshape(b, 1, -1), token_mask)

    def encode_prosody(self, frames: Tensor, frame_mask: np.ndarray, durations: np.ndarray) -> Tensor:
        return self.prosody_encoder(frames, frame_mask, durations)

    def predict_variances(self, h: Tensor, token_mask: np.ndarray) -> ProsodicFeatures:
        b, n, _ = h.shape
        return ProsodicFeatures(
            pitch=self.pitch_predictor(h, token_mask).reshape(b, n),
            energy=self.energy_predictor(h, token_mask).reshape(b, n),
            log_duration=self.duration_predictor(h, token_mask).reshape(b, n),
            embedding=self.prosody_predictor(h, token_mask),
            mask=token_mask,
        )

    def decode_acoustic(
        self,
        h: Tensor,
        pitch: Tensor,
        energy: Tensor,
        prosody_embedding: Tensor,
        durations: np.ndarray,
        spk_emb: np.ndarray,
    ) -> AcousticFeatures:
        b, n, _ = h.shape
        cond = (
            h
            + self.pitch_proj(pitch.reshape(b, n, 1))
            + self.energy_proj(energy.reshape(b, n, 1))
            + self.prosody_proj(prosody_embedding)
        )
        x = length_regulate(cond, durations)
        t = x.shape[1]
        lengths = np.asarray(durations).sum(axis=1)
        frame_mask = nn.sequence_mask(lengths, t)
        pe = nn.positional_encoding(t, self.cfg.d_hidden).astype(np.float32)
        spk = self.dec_spk_proj(Tensor(spk_emb.astype(np.float32))).reshape(b, 1, -1)
        x = x + Tensor(pe) + spk
        bias = nn.attention_bias(lengths, lengths, t, t)
        y = self.mel_head(self.decoder(x, bias))
        return AcousticFeatures(nn.masked(y, frame_mask), frame_mask)

    # -- full passes -------------------------------------------------------
    def forward(self, batch: Batch, mode: str = "teacher_forced") -> GeneratorOutput:
        if mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
        h = self.encode_text(batch.tokens, batch.token_mask, batch.speaker_emb)
        predicted = self.predict_variances(h, batch.token_mask)
        if mode == "teacher_forced":
            frames = Tensor(batch.frames)
            emb = self.encode_prosody(frames, batch.frame_mask, batch.durations)
            log_dur = np.log(np.maximum(batch.durations, 1)).astype(np.float32)
            target = ProsodicFeatures(
                pitch=Tensor(batch.pitch),
                energy=Tensor(batch.energy),
                log_duration=Tensor(np.where(batch.token_mask, log_dur, 0.0).astype(np.float32)),
                embedding=emb,
                mask=batch.token_mask,
            )
            durations = batch.durations
            acoustic = self.decode_acoustic(h, target.pitch, target.energy, emb, durations, batch.speaker_emb)
            return GeneratorOutput(acoustic, predicted, target, durations)
        durations = predicted.frame_durations()
        acoustic = self.decode_acoustic(
            h, predicted.pitch, predicted.energy, predicted.embedding, durations, batch.speaker_emb
        )
        return GeneratorOutput(acoustic, predicted, None, durations)

    __call__ = forward

    def synthesize(
        self,
        tokens,
        speaker_id: int,
        mode: str = "inference",
        truth: UtteranceRecord | None = None,
    ) -> tuple[AcousticFeatures, ProsodicFeatures]:
        """Single-utterance convenience wrapper around :meth:`forward`."""
        tokens = np.asarray(tokens, dtype=np.int64)
        if tokens.ndim != 1 or tokens.size == 0:
            raise ValueError("tokens must be a non-empty 1-D sequence")
        if tokens.min() < 0 or tokens.max() >= self.cfg.vocab_size:
            raise ValueError(f"token ids must lie in [0, {self.cfg.vocab_size})")
        if mode == "teacher_forced":
            if truth is None:
                raise ValueError("teacher_forced synthesis needs the ground-truth record")
            batch = collate([truth], self.cfg.d_spk)
        else:
            n = len(tokens)
            batch = Batch(
                utterance_ids=["synth"],
                speaker_ids=np.array([speaker_id]),
                speaker_emb=speaker_embed(speaker_id, self.cfg.d_spk)[None],
                tokens=tokens[None],
                token_mask=np.ones((1, n), dtype=bool),
                durations=np.zeros((1, n), dtype=np.int64),
                pitch=np.zeros((1, n), dtype=np.float32),
                energy=np.zeros((1, n), dtype=np.float32),
                frames=np.zeros((1, 1, self.cfg.d_mel), dtype=np.float32),
                frame_mask=np.ones((1, 1), dtype=bool),
            )
        out = self.forward(batch, mode)
        return out.acoustic, out.predicted
