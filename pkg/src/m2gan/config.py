"""Training configuration, ablation presets and the flat ``key=value`` config format."""

from __future__ import annotations

import zlib
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import numpy as np

from .discriminator import DiscriminatorConfig
from .generator import GeneratorConfig

ABLATIONS = ("proposed", "baseline", "no-text-speaker", "no-speaker", "no-prosody-disc", "enc-dec-4-4", "enc-only")

# Desk-scale discriminator widths; layer counts, heads, kernel and strides keep their full-size values.
DESK_WIDTHS = {"acoustic": (64, 128), "prosodic": (64, 128)}


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 3
    lr_peak: float = 0.002
    weight_decay: float = 0.01
    beta1: float = 0.5
    beta2: float = 0.9
    warmup_steps: int = 200
    max_frames_per_batch: int = 2000
    lambda_a: float = 0.1
    disc_lr_scale: float = 1.0  # discriminator lr = disc_lr_scale * generator lr
    adv_acoustic_epoch: int = 2
    adv_prosodic_epoch: int = 3
    seed: int = 0
    ablation: str = "proposed"
    disc_scale: str = "desk"
    divergence_threshold: float = 1e3
    # generator dims
    d_hidden: int = 128
    d_pros: int = 16
    gen_encoder_layers: int = 2
    gen_decoder_layers: int = 2
    gen_heads: int = 2
    gen_ff: int = 256
    gen_dropout: float = 0.1

    def __post_init__(self):
        if self.ablation not in ABLATIONS:
            raise ValueError(f"ablation must be one of {ABLATIONS}, got {self.ablation!r}")
        if self.disc_scale not in ("desk", "full"):
            raise ValueError(f"disc_scale must be 'desk' or 'full', got {self.disc_scale!r}")
        if self.epochs < 1 or self.warmup_steps < 1 or self.max_frames_per_batch < 1:
            raise ValueError("epochs, warmup_steps and max_frames_per_batch must be positive")
        if self.adv_acoustic_epoch < 1 or self.adv_prosodic_epoch < 1:
            raise ValueError("adversarial start epochs count from 1")

    # -- stage gates ---------------------------------------------------------
    def stage(self, epoch: int) -> int:
        """Stage number for a 1-based epoch: 1 = no adversarial term, 2 = +acoustic, 3 = +prosodic."""
        return min(epoch, 3)

    def gates(self, epoch: int) -> tuple[bool, bool]:
        """(acoustic, prosodic) adversarial terms enabled in ``epoch``; monotone in epoch."""
        return epoch >= self.adv_acoustic_epoch, epoch >= self.adv_prosodic_epoch

    # -- model configs -------------------------------------------------------
    def generator_config(self, vocab_size: int, d_mel: int, d_spk: int) -> GeneratorConfig:
        return GeneratorConfig(
            vocab_size=vocab_size,
            d_hidden=self.d_hidden,
            d_mel=d_mel,
            d_pros=self.d_pros,
            d_spk=d_spk,
            encoder_layers=self.gen_encoder_layers,
            decoder_layers=self.gen_decoder_layers,
            heads=self.gen_heads,
            feedforward_dim=self.gen_ff,
            dropout=self.gen_dropout,
        )

    def discriminator_configs(self) -> dict[str, DiscriminatorConfig]:
        """Discriminators for this run, keyed ``acoustic`` / ``prosodic``."""
        return ablation_discriminators(self.ablation, self.disc_scale)

    def to_text(self) -> str:
        return "".join(f"{k}={v}\n" for k, v in asdict(self).items())

    @classmethod
    def from_mapping(cls, values: dict[str, str]) -> "TrainConfig":
        types = {f.name: f.type for f in fields(cls)}
        unknown = set(values) - set(types)
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        defaults = cls()
        kwargs = {}
        for key, raw in values.items():
            current = getattr(defaults, key)
            if isinstance(current, bool):
                kwargs[key] = str(raw).strip().lower() in ("1", "true", "yes", "on")
            else:
                kwargs[key] = type(current)(raw)
        return cls(**kwargs)


def ablation_discriminators(ablation: str, scale: str = "desk") -> dict[str, DiscriminatorConfig]:
    """Map an ablation preset onto discriminator configs (empty for the baseline)."""
    if ablation not in ABLATIONS:
        raise ValueError(f"unknown ablation {ablation!r}")
    if ablation == "baseline":
        return {}
    overrides: dict = {}
    if ablation == "no-text-speaker":
        # no conditional encoder; decoder grows to keep the layer count
        overrides = dict(condition_text=False, condition_speaker=False, enc_layers=0, dec_layers=8)
    elif ablation == "no-speaker":
        overrides = dict(condition_speaker=False)
    elif ablation == "enc-dec-4-4":
        overrides = dict(enc_layers=4, dec_layers=4)
    elif ablation == "enc-only":
        overrides = dict(encoder_only=True, enc_layers=8, dec_layers=0)
    out = {}
    variants = ("acoustic",) if ablation == "no-prosody-disc" else ("acoustic", "prosodic")
    for variant in variants:
        cfg = DiscriminatorConfig(variant=variant, **overrides)
        if scale == "desk":
            cfg = cfg.scaled(*DESK_WIDTHS[variant])
        out[variant] = cfg
    return out


def parse_config_text(text: str) -> dict[str, str]:
    """Parse flat ``key=value`` lines; ``#`` starts a comment."""
    out: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected key=value, got {line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        out[key] = value
    return out


def load_config(path) -> TrainConfig:
    return TrainConfig.from_mapping(parse_config_text(Path(path).read_text()))


def with_overrides(cfg: TrainConfig, **kwargs) -> TrainConfig:
    return replace(cfg, **kwargs)


def substream(seed: int, *names) -> np.random.Generator:
    """Independent generator for a named purpose, e.g. ``substream(0, "shuffle", 2)``."""
    key = [seed & 0xFFFFFFFF]
    for name in names:
        key.append(zlib.crc32(str(name).encode()) if not isinstance(name, int) else name)
    return np.random.default_rng(key)
