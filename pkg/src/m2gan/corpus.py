"""Synthetic one-to-many "speech" corpus with closed-form conditional statistics.

Each utterance draws a hidden style scalar ``s ~ N(0, style_std^2)`` that the
model never sees. Token-level pitch, energy and duration all depend on ``s``,
so the same (text, speaker) pair has many valid realizations. A model trained
only with reconstruction losses regresses to the conditional mean and loses
the within-utterance pitch variation contributed by ``s``.

Token ``v`` of speaker ``k`` with style ``s``::

    pitch    = base_pitch[v] + offset(k) + s * pitch_contour[v] + N(0, prosody_noise^2)
    energy   = base_energy[v] + s * energy_contour[v] + N(0, prosody_noise^2)
    duration = max(1, base_duration[v] + round(s))
    frame    = token_proj[v] + timbre(k) + amp * cos(omega * pitch + phase)
               + energy * energy_dir + N(0, noise_std^2)      (every frame of the token)

Speaker traits (``timbre``, ``offset``) are linear in the frozen speaker
embedding, which is what makes zero-shot synthesis for unseen speakers
learnable at all.
"""

from __future__ import annotations

import base64
import hashlib
import io
import json
import logging
import os
from dataclasses import asdict, dataclass, field, fields
from functools import cached_property
from pathlib import Path

import numpy as np

from .speaker import SPEAKER_DIM, speaker_embed

log = logging.getLogger(__name__)

MAGIC = "M2C1"
_CONSONANTS = "ptkbdgmnslrvzfhw"
_VOWELS = "aeiou"


class CorpusFormatError(ValueError):
    """Malformed corpus file; message carries line number and byte offset."""


@dataclass(frozen=True)
class CorpusSpec:
    vocab_size: int = 32
    n_speakers: int = 16
    n_utterances: int = 2000
    min_tokens: int = 4
    max_tokens: int = 16
    d_mel: int = 20
    seed: int = 0
    style_std: float = 0.6
    noise_std: float = 0.05
    prosody_noise_std: float = 0.1
    min_duration: int = 3
    max_duration: int = 7
    harmonic_amp: float = 0.5
    test_fraction: float = 0.25
    digit_prob: float = 0.0
    d_spk: int = SPEAKER_DIM

    def __post_init__(self):
        if self.vocab_size < 1 or self.n_speakers < 1 or self.n_utterances < 0:
            raise ValueError("vocab_size, n_speakers must be positive and n_utterances non-negative")
        if not 1 <= self.min_tokens <= self.max_tokens:
            raise ValueError("need 1 <= min_tokens <= max_tokens")
        if not 1 <= self.min_duration <= self.max_duration:
            raise ValueError("need 1 <= min_duration <= max_duration")

    @classmethod
    def from_dict(cls, d: dict) -> "CorpusSpec":
        known = {f.name: f.type for f in fields(cls)}
        unknown = set(d) - set(known)
        if unknown:
            raise ValueError(f"unknown corpus spec fields: {sorted(unknown)}")
        return cls(**d)

    def test_speakers(self) -> frozenset[int]:
        """Speakers held out from training (zero-shot evaluation set)."""
        if self.n_speakers == 1:
            return frozenset()
        rng = np.random.default_rng([self.seed, 0x7E57])
        n_test = min(self.n_speakers - 1, max(1, int(round(self.n_speakers * self.test_fraction))))
        return frozenset(int(k) for k in rng.permutation(self.n_speakers)[:n_test])


@dataclass
class CorpusTables:
    """Seeded generative tables; everything the closed-form oracle needs."""

    base_pitch: np.ndarray
    pitch_contour: np.ndarray
    base_energy: np.ndarray
    energy_contour: np.ndarray
    base_duration: np.ndarray
    token_proj: np.ndarray
    timbre_matrix: np.ndarray
    offset_vector: np.ndarray
    omega: np.ndarray
    phase: np.ndarray
    energy_dir: np.ndarray

    @classmethod
    def build(cls, spec: CorpusSpec) -> "CorpusTables":
        rng = np.random.default_rng([spec.seed, 0x7AB1E5])
        v, d = spec.vocab_size, spec.d_mel
        return cls(
            base_pitch=rng.normal(0.0, 0.3, v),
            pitch_contour=rng.normal(0.0, 1.0, v),
            base_energy=rng.normal(1.0, 0.3, v),
            energy_contour=rng.normal(0.0, 0.5, v),
            base_duration=rng.integers(spec.min_duration, spec.max_duration + 1, v),
            token_proj=rng.normal(0.0, 0.5, (v, d)),
            timbre_matrix=rng.normal(0.0, 0.5, (d, spec.d_spk)),
            offset_vector=rng.normal(0.0, 0.5, spec.d_spk),
            omega=np.linspace(0.8, 2.5, d),
            phase=rng.uniform(0.0, 2 * np.pi, d),
            energy_dir=rng.normal(0.0, 0.3, d),
        )

    def timbre(self, speaker_id: int, spec: CorpusSpec) -> np.ndarray:
        return self.timbre_matrix @ speaker_embed(speaker_id, spec.d_spk).astype(np.float64)

    def pitch_offset(self, speaker_id: int, spec: CorpusSpec) -> float:
        return float(self.offset_vector @ speaker_embed(speaker_id, spec.d_spk).astype(np.float64))

    def token_frame(self, token: int, speaker_id: int, pitch, energy, spec: CorpusSpec) -> np.ndarray:
        """Noise-free frame(s) for ``token``; ``pitch``/``energy`` may be arrays."""
        pitch = np.asarray(pitch, dtype=np.float64)[..., None]
        energy = np.asarray(energy, dtype=np.float64)[..., None]
        return (
            self.token_proj[token]
            + self.timbre(speaker_id, spec)
            + spec.harmonic_amp * np.cos(self.omega * pitch + self.phase)
            + energy * self.energy_dir
        )


@dataclass
class UtteranceRecord:
    utterance_id: str
    speaker_id: int
    token_ids: np.ndarray
    durations: np.ndarray
    pitch: np.ndarray
    energy: np.ndarray
    style: float
    frames: np.ndarray
    text: str

    @property
    def n_frames(self) -> int:
        return int(self.frames.shape[0])

    @property
    def n_tokens(self) -> int:
        return int(len(self.token_ids))

    def equals(self, other: "UtteranceRecord") -> bool:
        return (
            self.utterance_id == other.utterance_id
            and self.speaker_id == other.speaker_id
            and self.text == other.text
            and self.style == other.style
            and all(
                np.array_equal(getattr(self, name), getattr(other, name))
                for name in ("token_ids", "durations", "pitch", "energy", "frames")
            )
        )


@dataclass
class Corpus:
    spec: CorpusSpec
    records: list[UtteranceRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    @cached_property
    def tables(self) -> CorpusTables:
        return CorpusTables.build(self.spec)

    def subset(self, records) -> "Corpus":
        return Corpus(self.spec, list(records))

    def train_split(self) -> "Corpus":
        held = self.spec.test_speakers()
        return self.subset(r for r in self.records if r.speaker_id not in held)

    def test_split(self) -> "Corpus":
        held = self.spec.test_speakers()
        return self.subset(r for r in self.records if r.speaker_id in held)

    def by_speaker(self) -> dict[int, list[UtteranceRecord]]:
        out: dict[int, list[UtteranceRecord]] = {}
        for r in self.records:
            out.setdefault(r.speaker_id, []).append(r)
        return out

    def equals(self, other: "Corpus") -> bool:
        return (
            self.spec == other.spec
            and len(self) == len(other)
            and all(a.equals(b) for a, b in zip(self.records, other.records))
        )


def syllable(token: int) -> str:
    return _CONSONANTS[token % len(_CONSONANTS)] + _VOWELS[(token // len(_CONSONANTS)) % len(_VOWELS)]


def render_text(token_ids, rng: np.random.Generator | None = None, digit_prob: float = 0.0) -> str:
    words = [syllable(int(t)) for t in token_ids]
    if rng is not None and digit_prob > 0 and rng.random() < digit_prob:
        words.insert(int(rng.integers(0, len(words) + 1)), str(int(rng.integers(1, 1000))))
    return " ".join(words)


def sample_utterance(spec: CorpusSpec, tables: CorpusTables, index: int) -> UtteranceRecord:
    rng = np.random.default_rng([spec.seed, 0xC0495, index])
    speaker = int(rng.integers(spec.n_speakers))
    n = int(rng.integers(spec.min_tokens, spec.max_tokens + 1))
    tokens = rng.integers(0, spec.vocab_size, n)
    style = float(rng.normal(0.0, spec.style_std))
    pitch = (
        tables.base_pitch[tokens]
        + tables.pitch_offset(speaker, spec)
        + style * tables.pitch_contour[tokens]
        + rng.normal(0.0, spec.prosody_noise_std, n)
    )
    energy = tables.base_energy[tokens] + style * tables.energy_contour[tokens] + rng.normal(0.0, spec.prosody_noise_std, n)
    durations = np.maximum(1, tables.base_duration[tokens] + int(np.round(style))).astype(np.int64)
    clean = np.stack([tables.token_frame(int(t), speaker, p, e, spec) for t, p, e in zip(tokens, pitch, energy)])
    frames = np.repeat(clean, durations, axis=0)
    frames = frames + rng.normal(0.0, spec.noise_std, frames.shape)
    return UtteranceRecord(
        utterance_id=f"utt{index:06d}",
        speaker_id=speaker,
        token_ids=tokens.astype(np.int64),
        durations=durations,
        pitch=pitch,
        energy=energy,
        style=style,
        frames=frames.astype(np.float32),
        text=render_text(tokens, rng, spec.digit_prob),
    )


def generate_corpus(spec: CorpusSpec) -> Corpus:
    """Generate ``spec.n_utterances`` records; identical seeds give identical corpora."""
    tables = CorpusTables.build(spec)
    corpus = Corpus(spec, [sample_utterance(spec, tables, i) for i in range(spec.n_utterances)])
    corpus.__dict__["tables"] = tables
    return corpus


# -- closed-form conditional statistics ---------------------------------------


def conditional_pitch_std(spec: CorpusSpec, tables: CorpusTables, token: int) -> float:
    """Std of a token's pitch given (token, speaker): sqrt(style^2 c^2 + noise^2)."""
    c = tables.pitch_contour[token]
    return float(np.sqrt(spec.style_std**2 * c**2 + spec.prosody_noise_std**2))


def conditional_mean_frame(spec: CorpusSpec, tables: CorpusTables, token: int, speaker_id: int) -> np.ndarray:
    """E[frame | token, speaker] using E[cos(w p + f)] = exp(-w^2 var / 2) cos(w mu + f) for Gaussian p."""
    mu_p = tables.base_pitch[token] + tables.pitch_offset(speaker_id, spec)
    var_p = conditional_pitch_std(spec, tables, token) ** 2
    mu_e = tables.base_energy[token]
    harmonic = spec.harmonic_amp * np.exp(-(tables.omega**2) * var_p / 2) * np.cos(tables.omega * mu_p + tables.phase)
    return tables.token_proj[token] + tables.timbre(speaker_id, spec) + harmonic + mu_e * tables.energy_dir


# -- numeral filter -----------------------------------------------------------


def filter_numerals(text: str) -> bool:
    """Keep (True) iff ``text`` contains no Unicode decimal digit."""
    return not any(ch.isdecimal() for ch in text)


def filter_corpus(corpus: Corpus) -> Corpus:
    kept = [r for r in corpus.records if filter_numerals(r.text)]
    dropped = len(corpus) - len(kept)
    if dropped:
        log.info("numeral filter dropped %d of %d utterances", dropped, len(corpus))
    return corpus.subset(kept)


# -- record file format -------------------------------------------------------


def _encode_record(r: UtteranceRecord) -> dict:
    frames = np.ascontiguousarray(r.frames, dtype="<f4")
    return {
        "id": r.utterance_id,
        "spk": r.speaker_id,
        "tokens": [int(t) for t in r.token_ids],
        "dur": [int(d) for d in r.durations],
        "pitch": [float(p) for p in r.pitch],
        "energy": [float(e) for e in r.energy],
        "style": float(r.style),
        "text": r.text,
        "frames_shape": list(frames.shape),
        "frames": base64.b64encode(frames.tobytes()).decode("ascii"),
    }


def _decode_record(d: dict) -> UtteranceRecord:
    shape = tuple(d["frames_shape"])
    raw = base64.b64decode(d["frames"], validate=True)
    frames = np.frombuffer(raw, dtype="<f4").astype(np.float32).reshape(shape)
    durations = np.asarray(d["dur"], dtype=np.int64)
    tokens = np.asarray(d["tokens"], dtype=np.int64)
    if len(durations) != len(tokens) or int(durations.sum()) != shape[0]:
        raise ValueError("durations do not match tokens/frames")
    return UtteranceRecord(
        utterance_id=str(d["id"]),
        speaker_id=int(d["spk"]),
        token_ids=tokens,
        durations=durations,
        pitch=np.asarray(d["pitch"], dtype=np.float64),
        energy=np.asarray(d["energy"], dtype=np.float64),
        style=float(d["style"]),
        frames=frames,
        text=str(d["text"]),
    )


def dumps_records(corpus: Corpus) -> str:
    buf = io.StringIO()
    buf.write(MAGIC + "\t" + json.dumps(asdict(corpus.spec), sort_keys=True) + "\n")
    for r in corpus.records:
        buf.write(json.dumps(_encode_record(r), sort_keys=True) + "\n")
    return buf.getvalue()


def save_records(corpus: Corpus, path) -> None:
    """Write the line-delimited ``M2C1`` file: header line, then one JSON record per line."""
    Path(path).write_text(dumps_records(corpus), encoding="utf-8")


def loads_records(text: str) -> Corpus:
    offset = 0
    lines = text.splitlines(keepends=True)
    if not lines:
        raise CorpusFormatError("line 1 (offset 0): empty file, missing M2C1 header")
    header = lines[0]
    if not header.startswith(MAGIC + "\t"):
        raise CorpusFormatError("line 1 (offset 0): missing M2C1 header")
    try:
        spec = CorpusSpec.from_dict(json.loads(header[len(MAGIC) + 1 :]))
    except (ValueError, TypeError) as exc:
        raise CorpusFormatError(f"line 1 (offset 0): bad header: {exc}") from None
    offset += len(header.encode("utf-8"))
    records = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.endswith("\n"):
            raise CorpusFormatError(f"line {lineno} (offset {offset}): truncated record (no line terminator)")
        try:
            records.append(_decode_record(json.loads(line)))
        except (ValueError, KeyError, TypeError) as exc:
            raise CorpusFormatError(f"line {lineno} (offset {offset}): malformed record: {exc}") from None
        offset += len(line.encode("utf-8"))
    return Corpus(spec, records)


def load_records(path) -> Corpus:
    return loads_records(Path(path).read_text(encoding="utf-8"))


def corpus_hash(corpus: Corpus) -> str:
    return hashlib.sha256(dumps_records(corpus).encode("utf-8")).hexdigest()


def cache_dir() -> Path:
    """Corpus cache directory; ``M2GAN_CACHE`` overrides the default."""
    return Path(os.environ.get("M2GAN_CACHE", Path.home() / ".cache" / "m2gan"))


def load_or_generate(spec: CorpusSpec) -> Corpus:
    key = hashlib.sha256(json.dumps(asdict(spec), sort_keys=True).encode()).hexdigest()[:16]
    path = cache_dir() / f"corpus-{key}.m2c"
    if path.exists():
        try:
            corpus = load_records(path)
            if corpus.spec == spec:
                return corpus
        except CorpusFormatError:
            log.warning("ignoring unreadable cached corpus %s", path)
    corpus = generate_corpus(spec)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(".tmp")
    save_records(corpus, tmp)
    tmp.replace(path)
    return corpus
