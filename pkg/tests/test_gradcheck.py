"""Finite-difference oracle for every differentiable op, layer and loss.

Each case is checked at several seeds in float64 with central differences
(step 1e-4); the scaled error |auto - fd| / max(1, |fd|) must stay below 1e-4.
"""

import numpy as np
import pytest

from helpers import FD_RTOL, gradcheck, leaf, to_float64, weighted_sum
from m2gan import losses, nn
from m2gan import tensor as T
from m2gan.discriminator import DiscriminatorConfig, FusionDiscriminator
from m2gan.features import AcousticFeatures, FrameScores, ProsodicFeatures
from m2gan.generator import AcousticGenerator, GeneratorConfig, ProsodyEncoder, VariancePredictor, length_regulate
from m2gan.tensor import Tensor

SEEDS = (0, 1, 2)


def _unary(op, **kw):
    def build(rng):
        x = leaf(rng, 3, 4, **kw)
        return (lambda: weighted_sum(op(x), np.random.default_rng(99))), [x]

    return build


def _binary(op, shape_a=(3, 4), shape_b=(4,), b_away=0.0):
    def build(rng):
        a = leaf(rng, *shape_a)
        b = leaf(rng, *shape_b, away_from_zero=b_away)
        return (lambda: weighted_sum(op(a, b), np.random.default_rng(98))), [a, b]

    return build


def _positive(op):
    def build(rng):
        x = Tensor(rng.uniform(0.5, 2.0, size=(3, 4)), requires_grad=True)
        return (lambda: weighted_sum(op(x), np.random.default_rng(97))), [x]

    return build


def case_matmul_2d(rng):
    a, b = leaf(rng, 3, 5), leaf(rng, 5, 2)
    return (lambda: weighted_sum(a @ b, rng_w(1))), [a, b]


def case_matmul_batched(rng):
    a, b = leaf(rng, 2, 3, 4), leaf(rng, 2, 4, 5)
    return (lambda: weighted_sum(a @ b, rng_w(2))), [a, b]


def case_matmul_flat(rng):
    a, b = leaf(rng, 2, 3, 4), leaf(rng, 4, 5)
    return (lambda: weighted_sum(a @ b, rng_w(3))), [a, b]


def case_matmul_broadcast(rng):
    a, b = leaf(rng, 3, 4), leaf(rng, 2, 4, 2)
    return (lambda: weighted_sum(a @ b, rng_w(4))), [a, b]


def case_sum_axis(rng):
    x = leaf(rng, 3, 4, 2)
    return (lambda: weighted_sum(x.sum(axis=1), rng_w(5))), [x]


def case_mean_keepdims(rng):
    x = leaf(rng, 3, 4)
    return (lambda: weighted_sum(x * x.mean(axis=0, keepdims=True), rng_w(6))), [x]


def case_std(rng):
    x = leaf(rng, 4, 5)
    return (lambda: weighted_sum(x.std(axis=1), rng_w(7))), [x]


def case_reshape_transpose(rng):
    x = leaf(rng, 2, 3, 4)
    return (lambda: weighted_sum(x.reshape(6, 4).transpose(1, 0) * 2.0, rng_w(8))), [x]


def case_getitem_basic(rng):
    x = leaf(rng, 4, 5)
    return (lambda: weighted_sum(x[1:3, ::2], rng_w(9))), [x]


def case_getitem_advanced(rng):
    x = leaf(rng, 5, 3)
    idx = np.array([0, 2, 2, 4])
    return (lambda: weighted_sum(x[idx], rng_w(10))), [x]


def case_concat(rng):
    a, b = leaf(rng, 2, 3), leaf(rng, 2, 2)
    return (lambda: weighted_sum(T.concat([a, b], axis=1).square(), rng_w(11))), [a, b]


def case_where(rng):
    a, b = leaf(rng, 3, 4), leaf(rng, 3, 4)
    mask = rng.random((3, 4)) > 0.5
    return (lambda: weighted_sum(T.where(mask, a * b, b), rng_w(12))), [a, b]


def case_softmax(rng):
    x = leaf(rng, 3, 5)
    return (lambda: weighted_sum(T.softmax(x, axis=-1), rng_w(13))), [x]


def case_log_softmax(rng):
    x = leaf(rng, 3, 5)
    return (lambda: weighted_sum(T.log_softmax(x, axis=0), rng_w(14))), [x]


def case_layer_norm(rng):
    x, g, b = leaf(rng, 3, 6), leaf(rng, 6), leaf(rng, 6)
    return (lambda: weighted_sum(T.layer_norm(x, g, b), rng_w(15))), [x, g, b]


def case_conv1d_stride1(rng):
    x, w = leaf(rng, 2, 7, 3), leaf(rng, 3, 3, 4)
    return (lambda: weighted_sum(T.conv1d(x, w), rng_w(16))), [x, w]


def case_conv1d_stride2_bias(rng):
    x, w, b = leaf(rng, 2, 9, 3), leaf(rng, 5, 3, 2), leaf(rng, 2)
    return (lambda: weighted_sum(T.conv1d(x, w, b, stride=2), rng_w(17))), [x, w, b]


def case_embedding(rng):
    table = leaf(rng, 6, 4)
    ids = np.array([[0, 3, 3], [5, 1, 0]])
    return (lambda: weighted_sum(T.embedding(table, ids), rng_w(18))), [table]


def case_dropout_fixed_mask(rng):
    x = leaf(rng, 4, 5)
    return (lambda: weighted_sum(T.dropout(x, 0.3, np.random.default_rng(5), True), rng_w(19))), [x]


def case_linear(rng):
    layer = nn.Linear(4, 3, rng)
    to_float64(layer)
    x = leaf(rng, 2, 5, 4)
    return (lambda: weighted_sum(layer(x), rng_w(20))), [x, layer.weight, layer.bias]


def _bias(rng, b, tq, tk, diagonal=10.0):
    qlen = rng.integers(1, tq + 1, size=b)
    qlen[0] = tq
    klen = rng.integers(1, tk + 1, size=b)
    klen[0] = tk
    return nn.attention_bias(qlen, klen, tq, tk, diagonal=diagonal).astype(np.float64)


def case_attention(rng):
    attn = nn.MultiHeadAttention(8, 2, rng)
    to_float64(attn)
    q, kv = leaf(rng, 2, 3, 8), leaf(rng, 2, 5, 8)
    bias = _bias(rng, 2, 3, 5)
    params = [q, kv, attn.q_proj.weight, attn.v_proj.bias]
    return (lambda: weighted_sum(attn(q, kv, kv, bias), rng_w(21))), params


def case_encoder_layer(rng):
    spec = nn.TransformerSpec(hidden_dim=8, feedforward_dim=12, heads=2, dropout=0.0)
    layer = nn.EncoderLayer(spec, rng)
    to_float64(layer)
    x = leaf(rng, 2, 4, 8)
    bias = _bias(rng, 2, 4, 4, diagonal=0.0)
    params = [x, layer.norm1.gamma, layer.self_attn.k_proj.weight, layer.ff.fc1.weight]
    return (lambda: weighted_sum(layer(x, bias), rng_w(22))), params


def case_decoder_layer(rng):
    spec = nn.TransformerSpec(hidden_dim=8, feedforward_dim=12, heads=2, dropout=0.0)
    layer = nn.DecoderLayer(spec, rng)
    to_float64(layer)
    x, mem = leaf(rng, 2, 5, 8), leaf(rng, 2, 3, 8)
    cross = _bias(rng, 2, 5, 3)
    params = [x, mem, layer.cross_attn.q_proj.weight, layer.norm3.beta]
    return (lambda: weighted_sum(layer(x, mem, None, cross), rng_w(23))), params


def case_length_regulate(rng):
    h = leaf(rng, 2, 3, 4)
    durations = np.array([[2, 1, 3], [1, 0, 2]])
    return (lambda: weighted_sum(length_regulate(h, durations), rng_w(24))), [h]


def case_variance_predictor(rng):
    vp = VariancePredictor(6, 2, 3, 0.0, rng)
    to_float64(vp)
    h = leaf(rng, 2, 5, 6)
    mask = nn.sequence_mask([5, 3], 5)
    params = [h, vp.conv1.weight, vp.norm2.gamma, vp.head.weight]
    return (lambda: weighted_sum(vp(h, mask), rng_w(25))), params


def case_prosody_encoder(rng):
    cfg = GeneratorConfig(d_hidden=8, d_mel=4, d_pros=3)
    enc = ProsodyEncoder(cfg, rng)
    to_float64(enc)
    durations = np.array([[2, 1, 2], [1, 3, 0]])
    frames = leaf(rng, 2, 5, 4)
    mask = nn.sequence_mask([5, 4], 5)
    return (lambda: weighted_sum(enc(frames, mask, durations), rng_w(26))), [frames, enc.conv1.weight, enc.conv2.bias]


def case_gen_acoustic_loss(rng):
    pred, truth = leaf(rng, 2, 4, 3), leaf(rng, 2, 4, 3)
    mask = nn.sequence_mask([4, 2], 4)
    return (lambda: losses.gen_acoustic_loss(AcousticFeatures(pred, mask), AcousticFeatures(truth, mask))), [pred]


def _pros(rng, b=2, n=4, d=3, grad=True):
    mask = nn.sequence_mask([n, n - 1], n)
    return ProsodicFeatures(
        Tensor(rng.normal(size=(b, n)), requires_grad=grad),
        Tensor(rng.normal(size=(b, n)), requires_grad=grad),
        Tensor(rng.normal(size=(b, n)), requires_grad=grad),
        Tensor(rng.normal(size=(b, n, d)), requires_grad=grad),
        mask,
    )


def case_gen_prosodic_loss(rng):
    pred, truth = _pros(rng), _pros(rng, grad=False)
    return (lambda: losses.gen_prosodic_loss(pred, truth)), pred.channels()


def case_hinge(rng):
    real = leaf(rng, 2, 5, scale=1.5, away_from_zero=0.05)
    fake = leaf(rng, 2, 5, scale=1.5, away_from_zero=0.05)
    # keep scores off the hinge kinks at +-1
    real.data += np.where(np.abs(real.data - 1) < 0.05, 0.1, 0.0)
    fake.data += np.where(np.abs(fake.data + 1) < 0.05, 0.1, 0.0)
    mask = nn.sequence_mask([5, 3], 5)
    return (lambda: losses.hinge_discriminator_loss(FrameScores(real, mask), FrameScores(fake, mask))), [real, fake]


def case_adv_generator(rng):
    s = leaf(rng, 2, 6)
    mask = nn.sequence_mask([6, 2], 6)
    return (lambda: losses.adv_generator_loss(FrameScores(s, mask))), [s]


def _tiny_disc(rng, variant, **kw):
    cfg = DiscriminatorConfig(
        variant=variant, kernel=3, enc_layers=1, dec_layers=1, hidden=8, ff=12, heads=2, dropout=0.0, **kw
    )
    d = FusionDiscriminator(cfg, 7, 5, 4 if variant == "acoustic" else 3, rng)
    to_float64(d)
    return d


def _cond(rng, b=2, n=4):
    tokens = rng.integers(0, 7, size=(b, n))
    mask = nn.sequence_mask([n, n - 1], n)
    spk = rng.normal(size=(b, 5))
    return tokens, mask, spk


def case_disc_acoustic(rng):
    d = _tiny_disc(rng, "acoustic")
    frames = leaf(rng, 2, 9, 4)
    fmask = nn.sequence_mask([9, 6], 9)
    cond = _cond(rng)
    picked = [d.convs[0].weight, d.decoder.layers[0].cross_attn.k_proj.weight, d.spk_proj.weight, d.text_emb.weight, d.head.weight]
    return (lambda: losses.adv_generator_loss(d(AcousticFeatures(frames, fmask), *cond))), [frames] + picked


def case_disc_prosodic(rng):
    d = _tiny_disc(rng, "prosodic")
    feats = _pros(rng)
    cond = _cond(rng)
    picked = [d.pitch_convs[1].weight, d.embedding_convs[0].weight, d.cond_encoder.layers[0].ff.fc2.weight]
    return (lambda: losses.adv_generator_loss(d(feats, *cond))), feats.channels() + picked


def case_disc_encoder_only(rng):
    cfg = DiscriminatorConfig(
        variant="acoustic", kernel=3, enc_layers=2, dec_layers=0, hidden=8, ff=12, heads=2, dropout=0.0, encoder_only=True
    )
    d = FusionDiscriminator(cfg, 7, 5, 4, rng)
    to_float64(d)
    frames = leaf(rng, 2, 8, 4)
    fmask = nn.sequence_mask([8, 5], 8)
    cond = _cond(rng)
    picked = [d.encoder.layers[1].self_attn.q_proj.weight, d.text_emb.weight]
    return (lambda: losses.adv_generator_loss(d(AcousticFeatures(frames, fmask), *cond))), [frames] + picked


def case_generator(rng):
    cfg = GeneratorConfig(
        vocab_size=7, d_hidden=8, d_mel=4, d_pros=3, d_spk=5, encoder_layers=1, decoder_layers=1, heads=2,
        feedforward_dim=12, dropout=0.0,
    )
    g = AcousticGenerator(cfg, rng)
    to_float64(g)
    from m2gan.batching import Batch

    durations = np.array([[2, 1, 2], [1, 3, 0]])
    t = 5
    batch = Batch(
        utterance_ids=["a", "b"],
        speaker_ids=np.array([0, 1]),
        speaker_emb=rng.normal(size=(2, 5)),
        tokens=np.array([[1, 2, 3], [4, 5, 0]]),
        token_mask=nn.sequence_mask([3, 2], 3),
        durations=durations,
        pitch=rng.normal(size=(2, 3)),
        energy=rng.normal(size=(2, 3)),
        frames=rng.normal(size=(2, t, 4)),
        frame_mask=nn.sequence_mask([5, 4], t),
    )

    def loss():
        out = g.forward(batch, "teacher_forced")
        real = AcousticFeatures(Tensor(batch.frames), batch.frame_mask)
        # target left attached: the finite-difference oracle sees every path
        return losses.gen_acoustic_loss(out.acoustic, real) + losses.gen_prosodic_loss(out.predicted, out.target)

    picked = [g.token_emb.weight, g.enc_spk_proj.weight, g.pitch_proj.weight, g.prosody_encoder.conv1.weight, g.mel_head.bias]
    return loss, picked


def rng_w(k: int) -> np.random.Generator:
    return np.random.default_rng(1000 + k)


CASES = {
    "add_broadcast": _binary(lambda a, b: a + b),
    "sub_broadcast": _binary(lambda a, b: a - b, (2, 3), (2, 1)),
    "mul_broadcast": _binary(lambda a, b: a * b, (2, 1, 4), (3, 1)),
    "div": _binary(lambda a, b: a / b, (3, 4), (3, 4), b_away=0.5),
    "neg": _unary(lambda x: -x),
    "relu": _unary(T.relu, away_from_zero=0.01),
    "leaky_relu": _unary(lambda x: T.leaky_relu(x, 0.2), away_from_zero=0.01),
    "abs": _unary(lambda x: x.abs(), away_from_zero=0.01),
    "square": _unary(lambda x: x.square()),
    "min_const": _unary(lambda x: T.min_const(x, 0.0), away_from_zero=0.01),
    "exp": _unary(lambda x: x.exp()),
    "tanh": _unary(T.tanh),
    "log": _positive(lambda x: x.log()),
    "sqrt": _positive(lambda x: T.elementwise("sqrt", x)),
    "matmul_2d": case_matmul_2d,
    "matmul_batched": case_matmul_batched,
    "matmul_flat": case_matmul_flat,
    "matmul_broadcast": case_matmul_broadcast,
    "sum_axis": case_sum_axis,
    "mean_keepdims": case_mean_keepdims,
    "std": case_std,
    "reshape_transpose": case_reshape_transpose,
    "getitem_basic": case_getitem_basic,
    "getitem_advanced": case_getitem_advanced,
    "concat": case_concat,
    "where": case_where,
    "softmax": case_softmax,
    "log_softmax": case_log_softmax,
    "layer_norm": case_layer_norm,
    "conv1d_stride1": case_conv1d_stride1,
    "conv1d_stride2_bias": case_conv1d_stride2_bias,
    "embedding": case_embedding,
    "dropout_fixed_mask": case_dropout_fixed_mask,
    "linear": case_linear,
    "attention_with_bias": case_attention,
    "encoder_layer": case_encoder_layer,
    "decoder_layer": case_decoder_layer,
    "length_regulate": case_length_regulate,
    "variance_predictor": case_variance_predictor,
    "prosody_encoder": case_prosody_encoder,
    "gen_acoustic_loss": case_gen_acoustic_loss,
    "gen_prosodic_loss": case_gen_prosodic_loss,
    "hinge_loss": case_hinge,
    "adv_generator_loss": case_adv_generator,
    "disc_acoustic": case_disc_acoustic,
    "disc_prosodic": case_disc_prosodic,
    "disc_encoder_only": case_disc_encoder_only,
    "generator_teacher_forced": case_generator,
}

ALL_CASES = [(name, seed) for name in CASES for seed in SEEDS]


def run_case(name: str, seed: int) -> float:
    rng = np.random.default_rng([seed, 0x6AD])
    loss_fn, tensors = CASES[name](rng)
    return gradcheck(loss_fn, tensors, rng=np.random.default_rng(seed))


def test_case_count_meets_minimum():
    assert len(ALL_CASES) >= 100


@pytest.mark.parametrize("name,seed", ALL_CASES)
def test_autodiff_matches_finite_differences(name, seed):
    assert run_case(name, seed) < FD_RTOL
