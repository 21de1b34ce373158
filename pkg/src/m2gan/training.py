"""Staged adversarial training loop.

Per batch: one teacher-forced generator forward; one discriminator update on
the detached generator outputs; one generator update with the discriminators
frozen. Adversarial terms are gated per epoch (epoch 1: none, epoch 2:
acoustic, epoch 3: acoustic + prosodic) while the discriminators train from
the first step. The learning-rate warmup restarts at every epoch.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import struct
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import losses
from .batching import Batch, collate, make_batches
from .config import TrainConfig, substream
from .corpus import Corpus, CorpusSpec, filter_corpus
from .discriminator import FusionDiscriminator
from .features import AcousticFeatures
from .generator import AcousticGenerator
from .nn import frozen
from .optim import AdamW, lr_at
from .tensor import Tensor, read_tensor, write_tensor

log = logging.getLogger(__name__)

CKPT_MAGIC = b"M2CK"
MODEL_PREFIXES = ("generator.", "disc_acoustic.", "disc_prosodic.")


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class EpochReport:
    epoch: int
    stage: int
    steps: int
    seconds: float
    bundles: list[losses.LossBundle] = field(default_factory=list)

    def mean(self, name: str) -> float:
        return float(np.mean([getattr(b, name) for b in self.bundles])) if self.bundles else float("nan")

    def summary(self) -> dict:
        keys = ("l_ga", "l_gp", "l_aa", "l_ap", "l_da", "l_dp")
        return {"epoch": self.epoch, "stage": self.stage, "steps": self.steps, **{k: self.mean(k) for k in keys}}


class Trainer:
    """Owns the generator, the discriminators and their separate optimizers."""

    def __init__(self, cfg: TrainConfig, corpus_spec: CorpusSpec):
        self.cfg = cfg
        self.corpus_spec = corpus_spec
        v, d_mel, d_spk = corpus_spec.vocab_size, corpus_spec.d_mel, corpus_spec.d_spk
        self.generator = AcousticGenerator(cfg.generator_config(v, d_mel, d_spk), substream(cfg.seed, "init", "generator"))
        dcfgs = cfg.discriminator_configs()
        self.disc_acoustic = None
        self.disc_prosodic = None
        if "acoustic" in dcfgs:
            self.disc_acoustic = FusionDiscriminator(
                dcfgs["acoustic"], v, d_spk, d_mel, substream(cfg.seed, "init", "disc_acoustic")
            )
        if "prosodic" in dcfgs:
            self.disc_prosodic = FusionDiscriminator(
                dcfgs["prosodic"], v, d_spk, cfg.d_pros, substream(cfg.seed, "init", "disc_prosodic")
            )
        betas = (cfg.beta1, cfg.beta2)
        self.gen_opt = AdamW(self.generator_parameters(), cfg.weight_decay, betas)
        disc_params = self.discriminator_parameters()
        self.disc_opt = AdamW(disc_params, cfg.weight_decay, betas) if disc_params else None
        self.epochs_done = 0
        self.global_step = 0

    # -- parameter bookkeeping ----------------------------------------------
    def generator_parameters(self):
        return list(self.generator.named_parameters("generator."))

    def discriminator_parameters(self):
        out = []
        if self.disc_acoustic is not None:
            out += list(self.disc_acoustic.named_parameters("disc_acoustic."))
        if self.disc_prosodic is not None:
            out += list(self.disc_prosodic.named_parameters("disc_prosodic."))
        return out

    def named_parameters(self):
        return self.generator_parameters() + self.discriminator_parameters()

    def discriminators(self) -> list[FusionDiscriminator]:
        return [d for d in (self.disc_acoustic, self.disc_prosodic) if d is not None]

    def set_epoch_rngs(self, epoch: int) -> None:
        self.generator.set_rng(substream(self.cfg.seed, "dropout", "generator", epoch))
        for name, d in (("disc_acoustic", self.disc_acoustic), ("disc_prosodic", self.disc_prosodic)):
            if d is not None:
                d.set_rng(substream(self.cfg.seed, "dropout", name, epoch))

    def train_mode(self, mode: bool = True) -> None:
        self.generator.train(mode)
        for d in self.discriminators():
            d.train(mode)

    # -- one batch -------------------------------------------------------------
    def train_step(self, batch: Batch, epoch: int, step_in_epoch: int) -> losses.LossBundle:
        cfg = self.cfg
        lr = lr_at(step_in_epoch, cfg.lr_peak, cfg.warmup_steps)
        adv_a, adv_p = cfg.gates(epoch)
        out = self.generator.forward(batch, "teacher_forced")
        real_a = AcousticFeatures(Tensor(batch.frames), batch.frame_mask)
        real_p = out.target.detach()
        cond = (batch.tokens, batch.token_mask, batch.speaker_emb)
        bundle = losses.LossBundle(lambda_a=cfg.lambda_a)

        # (b) discriminator update on detached generator outputs
        if self.disc_opt is not None:
            self.disc_opt.zero_grad()
            terms = []
            if self.disc_acoustic is not None:
                mem = self.disc_acoustic.encode_condition(*cond)
                l_da = losses.hinge_discriminator_loss(
                    self.disc_acoustic.score(real_a, mem), self.disc_acoustic.score(out.acoustic.detach(), mem)
                )
                bundle.l_da = l_da.item()
                terms.append(l_da)
            if self.disc_prosodic is not None:
                mem = self.disc_prosodic.encode_condition(*cond)
                l_dp = losses.hinge_discriminator_loss(
                    self.disc_prosodic.score(real_p, mem), self.disc_prosodic.score(out.predicted.detach(), mem)
                )
                bundle.l_dp = l_dp.item()
                terms.append(l_dp)
            l_d = terms[0] if len(terms) == 1 else losses.total_discriminator_loss(terms[0], terms[1])
            l_d.backward()
            self.disc_opt.step(lr * cfg.disc_lr_scale)

        # (c) generator update; discriminators frozen so they collect no gradient
        self.gen_opt.zero_grad()
        l_ga = losses.gen_acoustic_loss(out.acoustic, real_a)
        l_gp = losses.gen_prosodic_loss(out.predicted, real_p)
        zero = Tensor(np.zeros((), dtype=np.float32))
        l_aa, l_ap = zero, zero
        # frozen through backward too: requires_grad is consulted when gradients flow
        with frozen(*self.discriminators()):
            if adv_a and self.disc_acoustic is not None:
                l_aa = losses.adv_generator_loss(self.disc_acoustic(out.acoustic, *cond))
            if adv_p and self.disc_prosodic is not None:
                l_ap = losses.adv_generator_loss(self.disc_prosodic(out.predicted, *cond))
            total = losses.total_generator_loss(l_ga, l_gp, l_aa, l_ap, cfg.lambda_a)
            bundle.l_ga, bundle.l_gp = l_ga.item(), l_gp.item()
            bundle.l_aa, bundle.l_ap = l_aa.item(), l_ap.item()
            if not np.isfinite(total.item()) or total.item() > cfg.divergence_threshold:
                raise TrainingDiverged(
                    f"generator loss {total.item():.4g} exceeded {cfg.divergence_threshold:g} at step {self.global_step + 1}"
                )
            total.backward()
        self.gen_opt.step(lr)
        self.global_step += 1
        return bundle

    # -- epochs ------------------------------------------------------------------
    def epoch_batches(self, corpus: Corpus, epoch: int) -> list[list[int]]:
        lengths = [r.n_frames for r in corpus.records]
        return make_batches(lengths, self.cfg.max_frames_per_batch, substream(self.cfg.seed, "shuffle", epoch))

    def train_epoch(self, corpus: Corpus, epoch: int, log_writer=None) -> EpochReport:
        """Run one epoch (1-based) over ``corpus``; LR warmup restarts here."""
        stage = self.cfg.stage(epoch)
        self.set_epoch_rngs(epoch)
        self.train_mode(True)
        report = EpochReport(epoch=epoch, stage=stage, steps=0, seconds=0.0)
        start = time.perf_counter()
        d_spk = self.corpus_spec.d_spk
        for step, idx in enumerate(self.epoch_batches(corpus, epoch), start=1):
            batch = collate([corpus.records[i] for i in idx], d_spk)
            bundle = self.train_step(batch, epoch, step)
            report.bundles.append(bundle)
            if log_writer is not None:
                lr = lr_at(step, self.cfg.lr_peak, self.cfg.warmup_steps)
                log_writer.writerow(
                    [self.global_step, stage] + [repr(float(getattr(bundle, k))) for k in losses.LOG_COLUMNS[2:-1]] + [repr(lr)]
                )
        report.steps = len(report.bundles)
        report.seconds = time.perf_counter() - start
        self.epochs_done = epoch
        log.info("epoch %d (stage %d): %s", epoch, stage, report.summary())
        return report

    # -- checkpoints ---------------------------------------------------------------
    def checkpoint_arrays(self) -> dict[str, np.ndarray]:
        arrays = {name: p.data for name, p in self.named_parameters()}
        for key, value in self.gen_opt.state_arrays().items():
            arrays[f"optim.gen.{key}"] = value
        if self.disc_opt is not None:
            for key, value in self.disc_opt.state_arrays().items():
                arrays[f"optim.disc.{key}"] = value
        arrays["meta.epochs_done"] = np.array([self.epochs_done], dtype=np.float64)
        arrays["meta.global_step"] = np.array([self.global_step], dtype=np.float64)
        return arrays

    def manifest(self) -> dict:
        return {
            "format": "M2CK",
            "epochs_done": self.epochs_done,
            "global_step": self.global_step,
            "train_config": asdict(self.cfg),
            "corpus_spec": asdict(self.corpus_spec),
            "parameters": [{"name": n, "shape": list(p.shape)} for n, p in self.named_parameters()],
        }

    def save_checkpoint(self, path) -> Path:
        path = Path(path)
        save_arrays(path, self.checkpoint_arrays())
        manifest_path(path).write_text(json.dumps(self.manifest(), indent=1, sort_keys=True))
        return path

    def load_checkpoint(self, path) -> None:
        arrays = load_arrays(path)
        for name, p in self.named_parameters():
            if name not in arrays:
                raise KeyError(f"checkpoint {path} lacks parameter {name}")
            if arrays[name].shape != p.shape:
                raise ValueError(f"{name}: checkpoint shape {arrays[name].shape} != {p.shape}")
            p.data = arrays[name].astype(p.dtype).copy()
        self.gen_opt.load_state_arrays(_strip(arrays, "optim.gen."))
        if self.disc_opt is not None:
            self.disc_opt.load_state_arrays(_strip(arrays, "optim.disc."))
        self.epochs_done = int(arrays["meta.epochs_done"][0])
        self.global_step = int(arrays["meta.global_step"][0])

    @classmethod
    def from_checkpoint(cls, path) -> "Trainer":
        meta = json.loads(manifest_path(path).read_text())
        trainer = cls(TrainConfig(**meta["train_config"]), CorpusSpec(**meta["corpus_spec"]))
        trainer.load_checkpoint(path)
        return trainer


def _strip(arrays: dict[str, np.ndarray], prefix: str) -> dict[str, np.ndarray]:
    return {k[len(prefix) :]: v for k, v in arrays.items() if k.startswith(prefix)}


def manifest_path(ckpt_path) -> Path:
    p = Path(ckpt_path)
    return p.with_name(p.name + ".manifest.json")


def save_arrays(path, arrays: dict[str, np.ndarray]) -> None:
    """Named tensor table: ``M2CK | count u32 | (name_len u32, utf-8 name, M2T1 tensor)*``."""
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<I", len(arrays)))
    for name, arr in arrays.items():
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        write_tensor(buf, arr)
    Path(path).write_bytes(buf.getvalue())


def load_arrays(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        if fh.read(4) != CKPT_MAGIC:
            raise ValueError(f"{path} is not an M2CK checkpoint")
        (count,) = struct.unpack("<I", fh.read(4))
        out = {}
        for _ in range(count):
            (n,) = struct.unpack("<I", fh.read(4))
            name = fh.read(n).decode("utf-8")
            out[name] = read_tensor(fh)
    return out


@dataclass
class TrainingResult:
    trainer: Trainer
    reports: list[EpochReport]
    checkpoints: list[Path]
    loss_csv: Path | None


def training_corpus(corpus: Corpus) -> Corpus:
    """Train split with numeral-bearing transcripts removed."""
    return filter_corpus(corpus.train_split())


def run_training(
    cfg: TrainConfig,
    corpus: Corpus,
    out_dir=None,
    resume_from=None,
    until_epoch: int | None = None,
) -> TrainingResult:
    """Train for ``cfg.epochs`` staged epochs, checkpointing after each one.

    With ``resume_from`` the trainer state (weights, optimizer moments, step
    counters) is restored and training continues at the next epoch; because
    shuffling and dropout are seeded per epoch the continuation is identical
    to an uninterrupted run.
    """
    data = training_corpus(corpus)
    if not len(data):
        raise ValueError("training corpus is empty after the split and numeral filter")
    trainer = Trainer(cfg, corpus.spec)
    if resume_from is not None:
        trainer.load_checkpoint(resume_from)
    out = Path(out_dir) if out_dir is not None else None
    writer_fh = None
    writer = None
    csv_path = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        csv_path = out / "losses.csv"
        append = resume_from is not None and csv_path.exists()
        if append:
            _truncate_csv(csv_path, trainer.global_step)
        writer_fh = open(csv_path, "a" if append else "w", newline="")
        writer = csv.writer(writer_fh, lineterminator="\n")
        if not append:
            writer.writerow(losses.LOG_COLUMNS)
    reports, ckpts = [], []
    last = cfg.epochs if until_epoch is None else min(until_epoch, cfg.epochs)
    try:
        for epoch in range(trainer.epochs_done + 1, last + 1):
            reports.append(trainer.train_epoch(data, epoch, writer))
            if writer_fh is not None:
                writer_fh.flush()
            if out is not None:
                ckpts.append(trainer.save_checkpoint(out / f"epoch{epoch}.ckpt"))
    finally:
        if writer_fh is not None:
            writer_fh.close()
    return TrainingResult(trainer, reports, ckpts, csv_path)


def _truncate_csv(path: Path, keep_steps: int) -> None:
    lines = path.read_text().splitlines(keepends=True)
    path.write_text("".join(lines[: keep_steps + 1]))
