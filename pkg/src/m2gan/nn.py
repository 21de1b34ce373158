"""Neural building blocks on top of :mod:`m2gan.tensor`.

Sequences are batch-major ``[B, T, D]``. Variable lengths are handled with
boolean ``[B, T]`` masks (True marks a real position); attention receives an
additive ``[B, 1, Tq, Tk]`` bias that carries both key padding and the optional
cross-attention diagonal.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor

NEG_INF = -1e9


class Parameter(Tensor):
    __slots__ = ()

    def __init__(self, data, name: str | None = None):
        super().__init__(np.asarray(data, dtype=np.float32), requires_grad=True, name=name)


class Module:
    training: bool = True

    def children(self) -> Iterator[tuple[str, "Module"]]:
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{name}.{i}", item

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, value in vars(self).items():
            if isinstance(value, Parameter):
                yield prefix + name, value
        for name, child in self.children():
            yield from child.named_parameters(f"{prefix}{name}.")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, child in self.children():
            yield from child.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def set_rng(self, rng: np.random.Generator) -> None:
        """Route every dropout layer below this module to ``rng``."""
        for m in self.modules():
            if isinstance(m, Dropout):
                m.rng = rng

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        if missing:
            raise KeyError(f"missing parameters: {sorted(missing)}")
        for name, p in own.items():
            value = np.asarray(state[name])
            if value.shape != p.shape:
                raise ValueError(f"{name}: shape {value.shape} != {p.shape}")
            p.data = value.astype(p.dtype).copy()


@contextlib.contextmanager
def frozen(*modules: Module):
    """Temporarily stop parameters of ``modules`` from receiving gradients."""
    params = [p for m in modules if m is not None for p in m.parameters()]
    saved = [p.requires_grad for p in params]
    for p in params:
        p.requires_grad = False
    try:
        yield
    finally:
        for p, flag in zip(params, saved):
            p.requires_grad = flag


def xavier_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, shape) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True):
        self.weight = Parameter(xavier_uniform(rng, d_in, d_out, (d_in, d_out)))
        self.bias = Parameter(np.zeros(d_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = x @ self.weight
        return y + self.bias if self.bias is not None else y


class Embedding(Module):
    def __init__(self, num: int, dim: int, rng: np.random.Generator, std: float = 0.02):
        self.weight = Parameter(rng.normal(0.0, std, size=(num, dim)))

    def __call__(self, ids: np.ndarray) -> Tensor:
        return T.embedding(self.weight, ids)


class LayerNorm(Module):
    def __init__(self, dim: int):
        self.gamma = Parameter(np.ones(dim))
        self.beta = Parameter(np.zeros(dim))

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gamma, self.beta)


class Dropout(Module):
    def __init__(self, p: float):
        self.p = p
        self.rng = np.random.default_rng(0)

    def __call__(self, x: Tensor) -> Tensor:
        return T.dropout(x, self.p, self.rng, self.training)


@dataclass(frozen=True)
class Conv1dSpec:
    in_channels: int
    out_channels: int
    kernel_size: int = 11
    stride: int = 1

    def __post_init__(self):
        if self.kernel_size % 2 == 0:
            raise ValueError(f"kernel_size must be odd, got {self.kernel_size}")
        if self.stride not in (1, 2):
            raise ValueError(f"stride must be 1 or 2, got {self.stride}")

    @property
    def padding(self) -> int:
        return self.kernel_size // 2

    def out_length(self, t: int) -> int:
        return -(-t // self.stride)


class Conv1d(Module):
    def __init__(self, spec: Conv1dSpec, rng: np.random.Generator, bias: bool = True):
        self.spec = spec
        k, ci, co = spec.kernel_size, spec.in_channels, spec.out_channels
        self.weight = Parameter(xavier_uniform(rng, k * ci, co, (k, ci, co)))
        self.bias = Parameter(np.zeros(co)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv1d(x, self.weight, self.bias, stride=self.spec.stride)


def conv1d(x: Tensor, spec: Conv1dSpec, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    if x.shape[-1] != spec.in_channels:
        raise T.ShapeError(f"expected {spec.in_channels} input channels, got {x.shape[-1]}")
    return T.conv1d(x, weight, bias, stride=spec.stride)


def downsampled_lengths(lengths: np.ndarray, stride: int) -> np.ndarray:
    return -(-np.asarray(lengths) // stride)


def sequence_mask(lengths, max_len: int | None = None) -> np.ndarray:
    lengths = np.asarray(lengths)
    max_len = int(lengths.max()) if max_len is None else max_len
    return np.arange(max_len)[None, :] < lengths[:, None]


def positional_encoding(length: int, dim: int) -> np.ndarray:
    """Sinusoidal table ``[length, dim]``: sin on even columns, cos on odd."""
    if dim % 2:
        raise ValueError(f"positional encoding dim must be even, got {dim}")
    pos = np.arange(length)[:, None]
    freq = np.power(10000.0, -np.arange(0, dim, 2) / dim)
    pe = np.zeros((length, dim))
    pe[:, 0::2] = np.sin(pos * freq)
    pe[:, 1::2] = np.cos(pos * freq)
    return pe


@dataclass(frozen=True)
class AttentionBiasSpec:
    diagonal_bias: float = 10.0


def diagonal_key_index(tq: int, tk: int) -> np.ndarray:
    """Key position receiving the diagonal bias for each query: floor(i * Tk / Tq)."""
    return (np.arange(tq) * tk) // tq


def attention_bias(
    q_lengths,
    k_lengths,
    tq: int,
    tk: int,
    diagonal: float = 0.0,
    key_offset: int = 0,
) -> np.ndarray:
    """Additive ``[B, 1, Tq, Tk]`` energy bias.

    Padded keys get ``NEG_INF``. With ``diagonal`` nonzero, query ``i`` of item
    ``b`` gets ``+diagonal`` on key ``key_offset + floor(i * Lk / Lq)`` where
    ``Lq``/``Lk`` are that item's valid lengths and ``Lk`` excludes the first
    ``key_offset`` keys.
    """
    q_lengths = np.asarray(q_lengths)
    k_lengths = np.asarray(k_lengths)
    b = len(q_lengths)
    bias = np.where(sequence_mask(k_lengths, tk), 0.0, NEG_INF)[:, None, None, :]
    bias = np.repeat(bias, tq, axis=2).astype(np.float32)
    if diagonal:
        for i in range(b):
            lq = int(q_lengths[i])
            lk = int(k_lengths[i]) - key_offset
            if lq <= 0 or lk <= 0:
                continue
            cols = key_offset + diagonal_key_index(lq, lk)
            bias[i, 0, np.arange(lq), cols] += diagonal
    return bias


class MultiHeadAttention(Module):
    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        if dim % heads:
            raise ValueError(f"hidden dim {dim} not divisible by {heads} heads")
        self.heads = heads
        self.q_proj = Linear(dim, dim, rng)
        self.k_proj = Linear(dim, dim, rng)
        self.v_proj = Linear(dim, dim, rng)
        self.out_proj = Linear(dim, dim, rng)
        self.last_weights: np.ndarray | None = None

    def _split(self, x: Tensor) -> Tensor:
        b, t, d = x.shape
        return x.reshape(b, t, self.heads, d // self.heads).transpose(0, 2, 1, 3)

    def __call__(self, q: Tensor, k: Tensor, v: Tensor, bias: np.ndarray | None = None) -> Tensor:
        if q.shape[-1] != k.shape[-1] or k.shape[:-1] != v.shape[:-1]:
            raise T.ShapeError(f"attention shapes q={q.shape} k={k.shape} v={v.shape}")
        b, tq, d = q.shape
        qh = self._split(self.q_proj(q))
        kh = self._split(self.k_proj(k))
        vh = self._split(self.v_proj(v))
        energy = (qh @ kh.swapaxes(-1, -2)) * (1.0 / math.sqrt(d // self.heads))
        if bias is not None:
            energy = energy + Tensor(bias.astype(energy.dtype))
        weights = T.softmax(energy, axis=-1)
        self.last_weights = weights.data
        ctx = (weights @ vh).transpose(0, 2, 1, 3).reshape(b, tq, d)
        return self.out_proj(ctx)


def multi_head_attention(q: Tensor, k: Tensor, v: Tensor, attn: MultiHeadAttention, bias: np.ndarray | None = None) -> Tensor:
    return attn(q, k, v, bias)


class FeedForward(Module):
    def __init__(self, dim: int, ff_dim: int, rng: np.random.Generator, dropout: float):
        self.fc1 = Linear(dim, ff_dim, rng)
        self.fc2 = Linear(ff_dim, dim, rng)
        self.drop = Dropout(dropout)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(self.drop(T.relu(self.fc1(x))))


@dataclass(frozen=True)
class TransformerSpec:
    encoder_layers: int = 2
    decoder_layers: int = 6
    hidden_dim: int = 512
    feedforward_dim: int = 1024
    heads: int = 4
    dropout: float = 0.1

    def __post_init__(self):
        if self.hidden_dim % self.heads:
            raise ValueError(f"hidden_dim {self.hidden_dim} not divisible by heads {self.heads}")


class EncoderLayer(Module):
    """Pre-norm block: self-attention then feedforward, each residual."""

    def __init__(self, spec: TransformerSpec, rng: np.random.Generator):
        d = spec.hidden_dim
        self.norm1 = LayerNorm(d)
        self.self_attn = MultiHeadAttention(d, spec.heads, rng)
        self.norm2 = LayerNorm(d)
        self.ff = FeedForward(d, spec.feedforward_dim, rng, spec.dropout)
        self.drop = Dropout(spec.dropout)

    def __call__(self, x: Tensor, bias: np.ndarray | None = None) -> Tensor:
        h = self.norm1(x)
        x = x + self.drop(self.self_attn(h, h, h, bias))
        return x + self.drop(self.ff(self.norm2(x)))


class DecoderLayer(Module):
    """Pre-norm block: unmasked self-attention, cross-attention, feedforward."""

    def __init__(self, spec: TransformerSpec, rng: np.random.Generator):
        d = spec.hidden_dim
        self.norm1 = LayerNorm(d)
        self.self_attn = MultiHeadAttention(d, spec.heads, rng)
        self.norm2 = LayerNorm(d)
        self.cross_attn = MultiHeadAttention(d, spec.heads, rng)
        self.norm3 = LayerNorm(d)
        self.ff = FeedForward(d, spec.feedforward_dim, rng, spec.dropout)
        self.drop = Dropout(spec.dropout)

    def __call__(self, x: Tensor, memory: Tensor, self_bias=None, cross_bias=None) -> Tensor:
        h = self.norm1(x)
        x = x + self.drop(self.self_attn(h, h, h, self_bias))
        x = x + self.drop(self.cross_attn(self.norm2(x), memory, memory, cross_bias))
        return x + self.drop(self.ff(self.norm3(x)))


class TransformerEncoder(Module):
    def __init__(self, spec: TransformerSpec, rng: np.random.Generator, num_layers: int | None = None):
        n = spec.encoder_layers if num_layers is None else num_layers
        self.layers = [EncoderLayer(spec, rng) for _ in range(n)]
        self.norm = LayerNorm(spec.hidden_dim)

    def __call__(self, x: Tensor, bias: np.ndarray | None = None) -> Tensor:
        for layer in self.layers:
            x = layer(x, bias)
        return self.norm(x)


class TransformerDecoder(Module):
    def __init__(self, spec: TransformerSpec, rng: np.random.Generator, num_layers: int | None = None):
        n = spec.decoder_layers if num_layers is None else num_layers
        self.layers = [DecoderLayer(spec, rng) for _ in range(n)]
        self.norm = LayerNorm(spec.hidden_dim)

    def __call__(self, x: Tensor, memory: Tensor, self_bias=None, cross_bias=None) -> Tensor:
        for layer in self.layers:
            x = layer(x, memory, self_bias, cross_bias)
        return self.norm(x)


def masked(x: Tensor, mask: np.ndarray) -> Tensor:
    """Zero padded positions of ``[B, T, D]`` (or ``[B, T]``) activations."""
    m = mask.astype(x.dtype)
    if x.ndim == 3:
        m = m[:, :, None]
    return x * Tensor(m)
