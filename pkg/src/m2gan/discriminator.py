"""Multi-modal fusion discriminator.

A Transformer encoder reads the conditions (token embeddings plus a projected
speaker embedding, prepended as one extra position); a Transformer decoder
reads the candidate features and cross-attends to that memory, with a fixed
bias on the approximately-aligned key of every query. A linear head emits
one raw score per decoder position.

Two variants share the machinery:

* acoustic: frames pass through strided convolutions (each layer downsamples
  by its stride) before the decoder.
* prosodic: pitch, energy, log-duration and the prosody embedding each get
  their own conv stack; the projections are summed at stride 1, so there is
  one score per token.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import nn
from . import tensor as T
from .features import AcousticFeatures, FrameScores, ProsodicFeatures
from .nn import Conv1d, Conv1dSpec, Linear, Module, Parameter, TransformerSpec
from .tensor import Tensor

VARIANTS = ("acoustic", "prosodic")
PROSODIC_CHANNELS = ("pitch", "energy", "duration", "embedding")


@dataclass(frozen=True)
class DiscriminatorConfig:
    """Defaults are the full-size hyperparameters for each variant."""

    variant: str = "acoustic"
    conv_layers: int = 2
    kernel: int = 11
    stride: int | None = None
    enc_layers: int = 2
    dec_layers: int = 6
    hidden: int | None = None
    ff: int | None = None
    heads: int = 4
    dropout: float = 0.1
    diagonal_bias: float = 10.0
    condition_text: bool = True
    condition_speaker: bool = True
    encoder_only: bool = False
    conv_slope: float = 0.2

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        acoustic = self.variant == "acoustic"
        if self.stride is None:
            object.__setattr__(self, "stride", 2 if acoustic else 1)
        if self.hidden is None:
            object.__setattr__(self, "hidden", 512 if acoustic else 256)
        if self.ff is None:
            object.__setattr__(self, "ff", 1024 if acoustic else 512)
        if self.hidden % self.heads:
            raise ValueError(f"hidden {self.hidden} not divisible by heads {self.heads}")
        if self.encoder_only and self.dec_layers:
            raise ValueError("encoder-only discriminator must have dec_layers == 0")

    @property
    def total_stride(self) -> int:
        return self.stride**self.conv_layers

    def out_length(self, t: int) -> int:
        for _ in range(self.conv_layers):
            t = -(-t // self.stride)
        return t

    def transformer(self) -> TransformerSpec:
        return TransformerSpec(
            encoder_layers=self.enc_layers,
            decoder_layers=self.dec_layers,
            hidden_dim=self.hidden,
            feedforward_dim=self.ff,
            heads=self.heads,
            dropout=self.dropout,
        )

    def scaled(self, hidden: int, ff: int) -> "DiscriminatorConfig":
        return replace(self, hidden=hidden, ff=ff)


@dataclass
class ConditionMemory:
    values: Tensor | None  # [B, Nc, H]; None for encoder-only (raw inputs kept instead)
    mask: np.ndarray  # [B, Nc]
    key_offset: int  # leading non-text positions (the speaker slot)
    text_lengths: np.ndarray  # [B]; 0 when text is not a condition
    raw: Tensor | None = None  # un-encoded condition sequence (encoder-only path)


def _conv_stack(d_in: int, cfg: DiscriminatorConfig, rng: np.random.Generator) -> list[Conv1d]:
    convs = []
    for i in range(cfg.conv_layers):
        convs.append(Conv1d(Conv1dSpec(d_in if i == 0 else cfg.hidden, cfg.hidden, cfg.kernel, cfg.stride), rng))
    return convs


class FusionDiscriminator(Module):
    def __init__(
        self,
        cfg: DiscriminatorConfig,
        vocab_size: int,
        d_spk: int,
        d_feature: int,
        rng: np.random.Generator,
    ):
        self.cfg = cfg
        h = cfg.hidden
        spec = cfg.transformer()
        self.text_emb = nn.Embedding(vocab_size, h, rng, std=1.0) if cfg.condition_text else None
        self.spk_proj = Linear(d_spk, h, rng) if cfg.condition_speaker else None
        self.null_memory = None
        if not (cfg.condition_text or cfg.condition_speaker):
            self.null_memory = Parameter(rng.normal(0.0, 0.02, size=(1, h)))
        if cfg.encoder_only:
            self.encoder = nn.TransformerEncoder(spec, rng, num_layers=cfg.enc_layers)
            self.cond_encoder = None
            self.decoder = None
        else:
            self.encoder = None
            has_cond = cfg.condition_text or cfg.condition_speaker
            self.cond_encoder = nn.TransformerEncoder(spec, rng) if has_cond and cfg.enc_layers else None
            self.decoder = nn.TransformerDecoder(spec, rng)
        if cfg.variant == "acoustic":
            self.convs = _conv_stack(d_feature, cfg, rng)
        else:
            self.pitch_convs = _conv_stack(1, cfg, rng)
            self.energy_convs = _conv_stack(1, cfg, rng)
            self.duration_convs = _conv_stack(1, cfg, rng)
            self.embedding_convs = _conv_stack(d_feature, cfg, rng)
        self.head = Linear(h, 1, rng)

    # -- conditions --------------------------------------------------------
    def encode_condition(self, tokens: np.ndarray, token_mask: np.ndarray, spk_emb: np.ndarray | None) -> ConditionMemory:
        cfg = self.cfg
        b, n = tokens.shape
        parts: list[Tensor] = []
        masks: list[np.ndarray] = []
        offset = 0
        if cfg.condition_speaker:
            if spk_emb is None:
                raise ValueError("speaker-conditioned discriminator needs a speaker embedding")
            parts.append(self.spk_proj(Tensor(spk_emb.astype(np.float32))).reshape(b, 1, cfg.hidden))
            masks.append(np.ones((b, 1), dtype=bool))
            offset = 1
        if cfg.condition_text:
            pe = nn.positional_encoding(n, cfg.hidden).astype(np.float32)
            parts.append(nn.masked(self.text_emb(tokens) + Tensor(pe), token_mask))
            masks.append(token_mask)
        text_lengths = token_mask.sum(axis=1) if cfg.condition_text else np.zeros(b, dtype=np.int64)
        if not parts:
            null = self.null_memory.reshape(1, 1, cfg.hidden) + Tensor(np.zeros((b, 1, cfg.hidden), dtype=np.float32))
            return ConditionMemory(null, np.ones((b, 1), dtype=bool), 0, text_lengths, raw=null)
        x = parts[0] if len(parts) == 1 else T.concat(parts, axis=1)
        mask = masks[0] if len(masks) == 1 else np.concatenate(masks, axis=1)
        if cfg.encoder_only:
            return ConditionMemory(None, mask, offset, text_lengths, raw=x)
        if self.cond_encoder is not None:
            lens = mask.sum(axis=1)
            x = self.cond_encoder(x, nn.attention_bias(lens, lens, x.shape[1], x.shape[1]))
        return ConditionMemory(x, mask, offset, text_lengths)

    # -- feature front-ends ------------------------------------------------
    def _run_convs(self, convs: list[Conv1d], x: Tensor, lengths: np.ndarray) -> tuple[Tensor, np.ndarray]:
        for i, conv in enumerate(convs):
            x = conv(x)
            lengths = nn.downsampled_lengths(lengths, conv.spec.stride)
            if i < len(convs) - 1:
                x = T.leaky_relu(x, self.cfg.conv_slope)
            x = nn.masked(x, nn.sequence_mask(lengths, x.shape[1]))
        return x, lengths

    def _acoustic_input(self, features: AcousticFeatures) -> tuple[Tensor, np.ndarray]:
        if features.frames.shape[1] == 0 or not features.mask.any():
            raise ValueError("cannot score empty acoustic features")
        x = nn.masked(features.frames, features.mask)
        return self._run_convs(self.convs, x, features.lengths)

    def _prosodic_input(self, features: ProsodicFeatures) -> tuple[Tensor, np.ndarray]:
        b, n = features.mask.shape
        for name, ch in zip(PROSODIC_CHANNELS, features.channels()):
            if ch.shape[:2] != (b, n):
                raise T.ShapeError(f"prosodic channel {name} has shape {ch.shape}, expected leading ({b}, {n})")
        lengths = features.lengths
        stacks = (self.pitch_convs, self.energy_convs, self.duration_convs, self.embedding_convs)
        inputs = (
            features.pitch.reshape(b, n, 1),
            features.energy.reshape(b, n, 1),
            features.log_duration.reshape(b, n, 1),
            features.embedding,
        )
        total = None
        for convs, x in zip(stacks, inputs):
            y, out_len = self._run_convs(convs, nn.masked(x, features.mask), lengths)
            total = y if total is None else total + y
        return total, out_len

    # -- scoring -----------------------------------------------------------
    def score(self, features, memory: ConditionMemory) -> FrameScores:
        cfg = self.cfg
        if isinstance(features, AcousticFeatures):
            if cfg.variant != "acoustic":
                raise ValueError("acoustic features given to a prosodic discriminator")
            x, lengths = self._acoustic_input(features)
        else:
            if cfg.variant != "prosodic":
                raise ValueError("prosodic features given to an acoustic discriminator")
            x, lengths = self._prosodic_input(features)
        b, t, _ = x.shape
        out_mask = nn.sequence_mask(lengths, t)
        x = x + Tensor(nn.positional_encoding(t, cfg.hidden).astype(np.float32))
        if cfg.encoder_only:
            seq = T.concat([memory.raw, x], axis=1)
            mask = np.concatenate([memory.mask, out_mask], axis=1)
            lens_total = seq.shape[1]
            bias = np.where(mask, 0.0, nn.NEG_INF)[:, None, None, :].astype(np.float32)
            bias = np.broadcast_to(bias, (b, 1, lens_total, lens_total))
            y = self.encoder(seq, bias)[:, memory.mask.shape[1] :, :]
        else:
            self_bias = nn.attention_bias(lengths, lengths, t, t)
            tk = memory.values.shape[1]
            use_diag = cfg.condition_text and cfg.diagonal_bias
            cross_bias = nn.attention_bias(
                lengths,
                memory.mask.sum(axis=1),
                t,
                tk,
                diagonal=cfg.diagonal_bias if use_diag else 0.0,
                key_offset=memory.key_offset,
            )
            y = self.decoder(x, memory.values, self_bias, cross_bias)
        scores = self.head(y).reshape(b, t)
        return FrameScores(nn.masked(scores, out_mask), out_mask)

    def __call__(self, features, tokens, token_mask, spk_emb) -> FrameScores:
        return self.score(features, self.encode_condition(tokens, token_mask, spk_emb))


def score_acoustic(disc: FusionDiscriminator, features: AcousticFeatures, memory: ConditionMemory) -> FrameScores:
    return disc.score(features, memory)


def score_prosodic(disc: FusionDiscriminator, features: ProsodicFeatures, memory: ConditionMemory) -> FrameScores:
    return disc.score(features, memory)
