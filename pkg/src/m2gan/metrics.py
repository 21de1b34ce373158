"""Evaluation: pitch variability, speaker similarity and a reconstruction proxy.

Pitch of a synthesized utterance is the generator's predicted token-level
pitch channel; ground-truth pitch is the corpus channel. Both live in the
same normalized units, so only ratios and orderings are meaningful.

Speaker similarity uses a separate embedder trained here on the train split
(speaker identification); it shares nothing with the generator's frozen
speaker embedding.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .batching import Batch, collate
from .corpus import Corpus, UtteranceRecord
from .generator import AcousticGenerator
from .nn import Linear, Module
from .optim import AdamW
from .tensor import Tensor, no_grad

log = logging.getLogger(__name__)

REPORT_COLUMNS = ("utterance_id", "speaker_id", "pitch_std", "speaker_sim", "recon_mae")
UNITS_NOTE = "pitch values are in normalized synthetic units; compare ratios and orderings only"


# -- pitch ------------------------------------------------------------------


def pitch_std(values) -> float:
    """Population standard deviation of one utterance's pitch values."""
    values = np.asarray(values, dtype=np.float64)
    if values.size < 2:
        raise ValueError("pitch_std needs at least two values")
    return float(values.std())


def pitch_std_mean(utterances) -> float:
    """Mean of per-utterance stds; utterances with fewer than two values are skipped."""
    stds = []
    for i, u in enumerate(utterances):
        if np.asarray(u).size < 2:
            log.warning("utterance %d has fewer than two pitch values; excluded", i)
            continue
        stds.append(pitch_std(u))
    if not stds:
        raise ValueError("no utterance with at least two pitch values")
    return float(np.mean(stds))


# -- evaluation speaker embedder -----------------------------------------------


@dataclass(frozen=True)
class EmbedderConfig:
    hidden: int = 64
    dim: int = 32
    epochs: int = 12
    batch_size: int = 32
    lr: float = 3e-3
    seed: int = 1234


class EvalEmbedder(Module):
    """Frame-wise MLP, mean-pooled over frames, then a speaker classifier.

    The embedding is the pooled final hidden layer, centred on the train-split
    mean and L2-normalized.
    """

    def __init__(self, d_mel: int, n_classes: int, cfg: EmbedderConfig = EmbedderConfig()):
        rng = np.random.default_rng(cfg.seed)
        self.cfg = cfg
        self.l1 = Linear(d_mel, cfg.hidden, rng)
        self.l2 = Linear(cfg.hidden, cfg.dim, rng)
        self.classifier = Linear(cfg.dim, n_classes, rng)
        self.center = np.zeros(cfg.dim)
        self.classes: list[int] = []
        self.train_accuracy = float("nan")

    def pooled(self, frames: Tensor, mask: np.ndarray) -> Tensor:
        h = self.l2(T.relu(self.l1(frames)))
        w = mask.astype(np.float32) / np.maximum(mask.sum(axis=1, keepdims=True), 1)
        return (h * Tensor(w[:, :, None])).sum(axis=1)

    def embed_batch(self, frames: np.ndarray, mask: np.ndarray) -> np.ndarray:
        if frames.shape[1] == 0 or not mask.any(axis=1).all():
            raise ValueError("cannot embed empty frames")
        with no_grad():
            z = self.pooled(Tensor(frames.astype(np.float32)), mask).data.astype(np.float64)
        z = z - self.center
        return z / np.maximum(np.linalg.norm(z, axis=1, keepdims=True), 1e-12)

    def embed(self, frames: np.ndarray) -> np.ndarray:
        frames = np.asarray(frames)
        return self.embed_batch(frames[None], np.ones((1, frames.shape[0]), dtype=bool))[0]

    def accuracy(self, corpus: Corpus) -> float:
        lookup = {s: i for i, s in enumerate(self.classes)}
        hits = 0
        for chunk in _chunks(corpus.records, 64):
            b = collate(chunk)
            with no_grad():
                logits = self.classifier(self.pooled(Tensor(b.frames), b.frame_mask)).data
            hits += int(np.sum(logits.argmax(axis=1) == np.array([lookup[r.speaker_id] for r in chunk])))
        return hits / len(corpus)


def _chunks(items, size):
    return [items[i : i + size] for i in range(0, len(items), size)]


def train_eval_embedder(corpus: Corpus, cfg: EmbedderConfig = EmbedderConfig()) -> EvalEmbedder:
    """Fit the embedder on ``corpus`` (the train split) by speaker classification."""
    classes = sorted({r.speaker_id for r in corpus.records})
    lookup = {s: i for i, s in enumerate(classes)}
    model = EvalEmbedder(corpus.spec.d_mel, len(classes), cfg)
    model.classes = classes
    opt = AdamW(list(model.named_parameters()), weight_decay=0.0, betas=(0.9, 0.999))
    rng = np.random.default_rng(cfg.seed + 1)
    records = corpus.records
    for _ in range(cfg.epochs):
        for idx in _chunks(rng.permutation(len(records)), cfg.batch_size):
            chunk = [records[i] for i in idx]
            b = collate(chunk)
            labels = np.array([lookup[r.speaker_id] for r in chunk])
            logits = model.classifier(model.pooled(Tensor(b.frames), b.frame_mask))
            loss = -T.log_softmax(logits, axis=-1)[np.arange(len(chunk)), labels].mean()
            opt.zero_grad()
            loss.backward()
            opt.step(cfg.lr)
    pooled = []
    for chunk in _chunks(records, 64):
        b = collate(chunk)
        with no_grad():
            pooled.append(model.pooled(Tensor(b.frames), b.frame_mask).data.astype(np.float64))
    model.center = np.concatenate(pooled).mean(axis=0)
    model.train_accuracy = model.accuracy(corpus)
    return model


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.linalg.norm(a) * np.linalg.norm(b)
    if denom == 0:
        return 0.0
    return float(np.clip(a @ b / denom, -1.0, 1.0))


def speaker_similarity(embedder: EvalEmbedder, synth: np.ndarray, reference: np.ndarray) -> float:
    """Cosine between evaluation embeddings of two ``[T, D_mel]`` frame arrays."""
    return cosine(embedder.embed(synth), embedder.embed(reference))


# -- reports ----------------------------------------------------------------


@dataclass
class UtteranceScore:
    utterance_id: str
    speaker_id: int
    pitch_std: float
    speaker_sim: float
    recon_mae: float


@dataclass
class SystemRow:
    """One line of the summary table."""

    name: str
    quality_proxy: float  # teacher-forced frame MAE; lower is better
    speaker_sim: float
    pitch_std: float
    variance_ratio: float


@dataclass
class EvalReport:
    rows: list[UtteranceScore]
    gt_pitch_std_mean: float
    reference_sim: float
    ground_truth_sim: float
    embedder_accuracy: float
    extra: dict = field(default_factory=dict)

    @property
    def pitch_std_mean(self) -> float:
        return float(np.mean([r.pitch_std for r in self.rows]))

    @property
    def speaker_sim_mean(self) -> float:
        return float(np.mean([r.speaker_sim for r in self.rows]))

    @property
    def recon_mae_mean(self) -> float:
        return float(np.mean([r.recon_mae for r in self.rows]))

    @property
    def variance_ratio(self) -> float:
        return self.pitch_std_mean / self.gt_pitch_std_mean

    def system_row(self, name: str) -> SystemRow:
        return SystemRow(name, self.recon_mae_mean, self.speaker_sim_mean, self.pitch_std_mean, self.variance_ratio)

    def reference_row(self) -> SystemRow:
        return SystemRow("Reference", 0.0, self.reference_sim, self.gt_pitch_std_mean, 1.0)

    def ground_truth_row(self) -> SystemRow:
        return SystemRow("Ground Truth", 0.0, self.ground_truth_sim, self.gt_pitch_std_mean, 1.0)

    def close_to(self, other: "EvalReport", tol: float = 1e-6) -> bool:
        if len(self.rows) != len(other.rows):
            return False
        for a, b in zip(self.rows, other.rows):
            if (a.utterance_id, a.speaker_id) != (b.utterance_id, b.speaker_id):
                return False
            if any(abs(getattr(a, k) - getattr(b, k)) > tol for k in ("pitch_std", "speaker_sim", "recon_mae")):
                return False
        return abs(self.gt_pitch_std_mean - other.gt_pitch_std_mean) <= tol

    def write_csv(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(REPORT_COLUMNS)
            for r in self.rows:
                w.writerow([r.utterance_id, r.speaker_id, repr(r.pitch_std), repr(r.speaker_sim), repr(r.recon_mae)])
        return path


def read_report_csv(path) -> list[UtteranceScore]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"evaluation CSV not found: {path}")
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != REPORT_COLUMNS:
            raise ValueError(f"{path}: expected columns {REPORT_COLUMNS}, got {reader.fieldnames}")
        return [
            UtteranceScore(
                row["utterance_id"],
                int(row["speaker_id"]),
                float(row["pitch_std"]),
                float(row["speaker_sim"]),
                float(row["recon_mae"]),
            )
            for row in reader
        ]


def reference_pairs(records: list[UtteranceRecord]) -> list[tuple[UtteranceRecord, UtteranceRecord]]:
    """Pair each utterance with the next (cyclically, by id) utterance of its speaker."""
    by_spk: dict[int, list[UtteranceRecord]] = {}
    for r in sorted(records, key=lambda r: r.utterance_id):
        by_spk.setdefault(r.speaker_id, []).append(r)
    pairs = []
    for spk, group in sorted(by_spk.items()):
        if len(group) < 2:
            log.warning("speaker %d has a single test utterance; skipped", spk)
            continue
        for i, r in enumerate(group):
            pairs.append((r, group[(i + 1) % len(group)]))
    return sorted(pairs, key=lambda p: p[0].utterance_id)


def _frames_of(batch_frames: np.ndarray, mask: np.ndarray, i: int) -> np.ndarray:
    return batch_frames[i, : int(mask[i].sum())]


def evaluate(
    generator: AcousticGenerator,
    corpus: Corpus,
    embedder: EvalEmbedder | None = None,
    batch_size: int = 32,
) -> EvalReport:
    """Score inference-mode synthesis on the held-out speakers of ``corpus``."""
    test = corpus.test_split()
    if embedder is None:
        embedder = train_eval_embedder(corpus.train_split())
    pairs = reference_pairs(test.records)
    if not pairs:
        raise ValueError("no evaluable test utterances (need two per held-out speaker)")
    generator.eval()
    d_spk = generator.cfg.d_spk
    rows: list[UtteranceScore] = []
    ref_sims, gt_sims = [], []
    for chunk in _chunks(pairs, batch_size):
        recs = [p[0] for p in chunk]
        batch: Batch = collate(recs, d_spk)
        refs = [p[1] for p in chunk]
        with no_grad():
            synth = generator.forward(batch, "inference")
            forced = generator.forward(batch, "teacher_forced")
        s_frames, s_mask = synth.acoustic.frames.data, synth.acoustic.mask
        t_frames = forced.acoustic.frames.data
        s_emb = embedder.embed_batch(s_frames, s_mask)
        gt_emb = embedder.embed_batch(batch.frames, batch.frame_mask)
        ref_batch = collate(refs, d_spk)
        ref_emb = embedder.embed_batch(ref_batch.frames, ref_batch.frame_mask)
        pitch = synth.predicted.pitch.data
        for i, r in enumerate(recs):
            n = r.n_tokens
            mae = float(np.abs(_frames_of(t_frames, batch.frame_mask, i) - r.frames).mean())
            rows.append(
                UtteranceScore(
                    utterance_id=r.utterance_id,
                    speaker_id=r.speaker_id,
                    pitch_std=pitch_std(pitch[i, :n]) if n >= 2 else 0.0,
                    speaker_sim=cosine(s_emb[i], ref_emb[i]),
                    recon_mae=mae,
                )
            )
            ref_sims.append(cosine(gt_emb[i], gt_emb[i]))
            gt_sims.append(cosine(gt_emb[i], ref_emb[i]))
    gt_std = pitch_std_mean([p[0].pitch for p in pairs])
    return EvalReport(
        rows=rows,
        gt_pitch_std_mean=gt_std,
        reference_sim=float(np.mean(ref_sims)),
        ground_truth_sim=float(np.mean(gt_sims)),
        embedder_accuracy=embedder.train_accuracy,
    )


def same_vs_cross_gap(embedder: EvalEmbedder, corpus: Corpus) -> tuple[float, float]:
    """Mean cosine of ground-truth same-speaker (different utterance) and cross-speaker pairs."""
    recs = sorted(corpus.records, key=lambda r: r.utterance_id)
    embs = []
    for chunk in _chunks(recs, 64):
        b = collate(chunk)
        embs.append(embedder.embed_batch(b.frames, b.frame_mask))
    e = np.concatenate(embs)
    spk = np.array([r.speaker_id for r in recs])
    sims = e @ e.T
    same = spk[:, None] == spk[None, :]
    off = ~np.eye(len(recs), dtype=bool)
    return float(sims[same & off].mean()), float(sims[~same].mean())
