"""Command-line entry point: gen-data, train, eval, ablate, report.

Exit codes: 0 success, 2 usage error, 3 data error, 4 training divergence.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, replace
from pathlib import Path

from .config import ABLATIONS, TrainConfig, load_config
from .corpus import CorpusFormatError, CorpusSpec, cache_dir, corpus_hash, generate_corpus, load_records, save_records
from .experiments import render_summary, run_ablation_grid, train_system, write_eval
from .metrics import evaluate
from .training import Trainer, TrainingDiverged

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGED = 0, 2, 3, 4

log = logging.getLogger("m2gan")


class DataError(Exception):
    pass


def _load_corpus(path):
    p = Path(path)
    if not p.exists():
        raise DataError(f"corpus not found: {p}")
    try:
        return load_records(p)
    except CorpusFormatError as exc:
        raise DataError(f"{p}: {exc}") from exc


def _load_cfg(args) -> TrainConfig:
    cfg = TrainConfig()
    if getattr(args, "config", None):
        p = Path(args.config)
        if not p.exists():
            raise DataError(f"config not found: {p}")
        cfg = load_config(p)
    if getattr(args, "seed", None) is not None:
        cfg = replace(cfg, seed=args.seed)
    return cfg


def cmd_gen_data(args) -> int:
    spec = CorpusSpec(
        n_speakers=args.n_speakers,
        n_utterances=args.n_utterances,
        seed=args.seed,
        digit_prob=args.digit_prob,
    )
    out = Path(args.out) if args.out else cache_dir() / f"corpus-seed{args.seed}-{args.n_speakers}x{args.n_utterances}.m2c"
    corpus = generate_corpus(spec)
    try:
        out.parent.mkdir(parents=True, exist_ok=True)
        save_records(corpus, out)
    except OSError as exc:
        raise DataError(f"cannot write corpus to {out}: {exc}") from exc
    manifest = {"spec": asdict(spec), "corpus_hash": corpus_hash(corpus), "path": str(out), "n_records": len(corpus)}
    out.with_name(out.name + ".manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    print(f"{out}\t{manifest['corpus_hash']}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _load_cfg(args)
    if args.baseline and args.ablate:
        raise UsageError("--baseline and --ablate are mutually exclusive")
    ablation = "baseline" if args.baseline else (args.ablate or cfg.ablation)
    cfg = replace(cfg, ablation=ablation)
    corpus = _load_corpus(args.corpus)
    train_system(ablation, cfg, corpus, args.out)
    print(Path(args.out) / f"epoch{cfg.epochs}.ckpt")
    return EXIT_OK


def cmd_eval(args) -> int:
    corpus = _load_corpus(args.corpus)
    ckpt = Path(args.checkpoint)
    if not ckpt.exists():
        raise DataError(f"checkpoint not found: {ckpt}")
    trainer = Trainer.from_checkpoint(ckpt)
    report = evaluate(trainer.generator, corpus)
    write_eval(report, args.out)
    print(
        f"variance_ratio={report.variance_ratio:.4f} speaker_sim={report.speaker_sim_mean:.4f} "
        f"quality-proxy={report.recon_mae_mean:.4f}"
    )
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _load_cfg(args)
    corpus = _load_corpus(args.corpus)
    run_ablation_grid(cfg, corpus, args.out, jobs=args.jobs)
    print(Path(args.out) / "ablation.csv")
    return EXIT_OK


def cmd_report(args) -> int:
    try:
        csv_path, md_path = render_summary(args.baseline, args.proposed, args.out)
    except FileNotFoundError as exc:
        raise DataError(str(exc)) from exc
    print(md_path.read_text(), end="")
    return EXIT_OK


class UsageError(Exception):
    pass


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="m2gan", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic corpus")
    g.add_argument("--out", help="corpus file (default: under $M2GAN_CACHE)")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--n-speakers", type=int, default=16)
    g.add_argument("--n-utterances", type=int, default=2000)
    g.add_argument("--digit-prob", type=float, default=0.0, help="chance a transcript carries a numeral")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="staged adversarial training")
    t.add_argument("--config", help="key=value config file")
    t.add_argument("--corpus", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--ablate", choices=[a for a in ABLATIONS if a not in ("proposed", "baseline")])
    t.add_argument("--baseline", action="store_true", help="no discriminators at all")
    t.add_argument("--seed", type=int)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on the held-out speakers")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--corpus", required=True)
    e.add_argument("--out", required=True, help="per-utterance CSV")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="train and evaluate all seven presets")
    a.add_argument("--config")
    a.add_argument("--corpus", required=True)
    a.add_argument("--out", required=True)
    a.add_argument("--jobs", type=int, default=1)
    a.add_argument("--seed", type=int)
    a.set_defaults(func=cmd_ablate)

    r = sub.add_parser("report", help="render the four-row summary table")
    r.add_argument("--baseline", required=True, help="baseline eval CSV")
    r.add_argument("--proposed", required=True, help="proposed eval CSV")
    r.add_argument("--out", required=True, help="output prefix; writes <out>.csv and <out>.md")
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, ValueError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except TrainingDiverged as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
