import logging

import numpy as np
import pytest

from m2gan.corpus import (
    Corpus,
    CorpusFormatError,
    CorpusSpec,
    conditional_mean_frame,
    conditional_pitch_std,
    dumps_records,
    filter_corpus,
    filter_numerals,
    generate_corpus,
    load_or_generate,
    load_records,
    loads_records,
    save_records,
)
from m2gan.metrics import pitch_std_mean

SMALL = CorpusSpec(n_utterances=20, n_speakers=4, seed=3)


def pitch_oracle(spec: CorpusSpec, tables, draws: int, seed: int) -> float:
    """Monte-Carlo mean of per-utterance pitch std, re-deriving pitch from the generative tables."""
    rng = np.random.default_rng(seed)
    offsets = np.array([tables.pitch_offset(k, spec) for k in range(spec.n_speakers)])
    k = rng.integers(spec.n_speakers, size=draws)
    n = rng.integers(spec.min_tokens, spec.max_tokens + 1, size=draws)
    s = rng.normal(0.0, spec.style_std, size=draws)
    out = np.empty(draws)
    for i in range(draws):
        tok = rng.integers(0, spec.vocab_size, n[i])
        p = tables.base_pitch[tok] + offsets[k[i]] + s[i] * tables.pitch_contour[tok]
        out[i] = (p + rng.normal(0.0, spec.prosody_noise_std, n[i])).std()
    return float(out.mean())


@pytest.fixture(scope="module")
def oracle_corpus():
    # few tokens and speakers so every (token, speaker) cell gets thousands of draws
    spec = CorpusSpec(vocab_size=3, n_speakers=2, n_utterances=10_000, min_tokens=4, max_tokens=4, seed=11)
    return generate_corpus(spec)


def first_occurrences(corpus: Corpus, token: int, speaker: int):
    """Pitch and first frame of the first occurrence of ``token`` in each of ``speaker``'s utterances."""
    pitch, frames = [], []
    for r in corpus:
        if r.speaker_id != speaker:
            continue
        idx = np.flatnonzero(r.token_ids == token)
        if idx.size:
            i = idx[0]
            pitch.append(r.pitch[i])
            frames.append(r.frames[int(r.durations[:i].sum())])
    return np.array(pitch), np.array(frames)


def test_same_seed_is_byte_identical():
    assert dumps_records(generate_corpus(SMALL)) == dumps_records(generate_corpus(SMALL))
    other = CorpusSpec(n_utterances=20, n_speakers=4, seed=4)
    assert dumps_records(generate_corpus(other)) != dumps_records(generate_corpus(SMALL))


def test_record_invariants():
    for r in generate_corpus(SMALL):
        assert r.durations.sum() == r.n_frames
        assert (r.durations >= 1).all()
        assert len(r.pitch) == len(r.energy) == r.n_tokens
        assert SMALL.min_tokens <= r.n_tokens <= SMALL.max_tokens
        assert r.frames.shape[1] == SMALL.d_mel


def test_split_speakers_disjoint(default_corpus):
    train = {r.speaker_id for r in default_corpus.train_split()}
    test = {r.speaker_id for r in default_corpus.test_split()}
    assert train and test and not train & test
    assert len(default_corpus.train_split()) + len(default_corpus.test_split()) == len(default_corpus)


@pytest.mark.parametrize("token", range(3))
@pytest.mark.parametrize("speaker", range(2))
def test_conditional_pitch_std_matches_closed_form(oracle_corpus, token, speaker):
    spec, tables = oracle_corpus.spec, oracle_corpus.tables
    closed = conditional_pitch_std(spec, tables, token)
    # independent oracle: 10,000 draws of the style latent and the prosody noise
    rng = np.random.default_rng(99)
    s = rng.normal(0.0, spec.style_std, 10_000)
    mc = np.std(s * tables.pitch_contour[token] + rng.normal(0.0, spec.prosody_noise_std, 10_000))
    assert mc == pytest.approx(closed, rel=0.05)
    pitch, _ = first_occurrences(oracle_corpus, token, speaker)
    assert len(pitch) > 3000
    assert np.std(pitch) == pytest.approx(closed, rel=0.05)


@pytest.mark.parametrize("token", range(3))
@pytest.mark.parametrize("speaker", range(2))
def test_conditional_mean_frame_matches_closed_form(oracle_corpus, token, speaker):
    analytic = conditional_mean_frame(oracle_corpus.spec, oracle_corpus.tables, token, speaker)
    _, frames = first_occurrences(oracle_corpus, token, speaker)
    err = np.linalg.norm(frames.mean(axis=0) - analytic) / np.linalg.norm(analytic)
    assert err < 0.01


def test_ground_truth_pitch_std_mean_matches_oracle(default_corpus):
    oracle = pitch_oracle(default_corpus.spec, default_corpus.tables, 100_000, seed=2024)
    test = filter_corpus(default_corpus.test_split())
    assert pitch_std_mean([r.pitch for r in test]) == pytest.approx(oracle, rel=0.03)


# -- numeral filter -----------------------------------------------------------


@pytest.mark.parametrize(
    "text,keep",
    [("page 42", False), ("hello world", True), ("chapter Ⅻ", True), ("١٢ arabic-indic", False)],
)
def test_filter_examples(text, keep):
    assert filter_numerals(text) is keep


def test_filter_rate_tracks_injection_probability():
    corpus = generate_corpus(CorpusSpec(n_utterances=2000, digit_prob=0.07, seed=5))
    dropped = 1 - len(filter_corpus(corpus)) / len(corpus)
    assert 0.05 <= dropped <= 0.09
    assert all(filter_numerals(r.text) for r in filter_corpus(corpus))


def test_default_corpus_has_no_numerals(default_corpus):
    assert len(filter_corpus(default_corpus)) == len(default_corpus)


# -- record files -------------------------------------------------------------


def test_save_load_round_trip(tmp_path):
    corpus = generate_corpus(SMALL)
    path = tmp_path / "c.m2c"
    save_records(corpus, path)
    assert load_records(path).equals(corpus)
    assert path.read_text().startswith("M2C1\t")


def test_empty_corpus_is_header_only(tmp_path):
    empty = generate_corpus(CorpusSpec(n_utterances=0))
    path = tmp_path / "e.m2c"
    save_records(empty, path)
    lines = path.read_text().splitlines()
    assert len(lines) == 1 and lines[0].startswith("M2C1\t")
    assert len(load_records(path)) == 0


def test_truncated_file_reports_line_and_offset():
    text = dumps_records(generate_corpus(SMALL))
    lines = text.splitlines(keepends=True)
    cut = "".join(lines[:3]) + lines[3][:40]
    offset = len("".join(lines[:3]).encode())
    with pytest.raises(CorpusFormatError, match=rf"line 4 \(offset {offset}\)"):
        loads_records(cut)


def test_malformed_record_reports_line():
    lines = dumps_records(generate_corpus(SMALL)).splitlines(keepends=True)
    lines[2] = '{"id": "x"}\n'
    with pytest.raises(CorpusFormatError, match=r"line 3 "):
        loads_records("".join(lines))
    with pytest.raises(CorpusFormatError, match="header"):
        loads_records("not a corpus\n")


def test_cache_directory_override(tmp_path, monkeypatch, caplog):
    monkeypatch.setenv("M2GAN_CACHE", str(tmp_path))
    first = load_or_generate(SMALL)
    files = list(tmp_path.glob("corpus-*.m2c"))
    assert len(files) == 1
    assert load_or_generate(SMALL).equals(first)
    files[0].write_text("garbage\n")
    with caplog.at_level(logging.WARNING):
        assert load_or_generate(SMALL).equals(first)
    assert "unreadable" in caplog.text
