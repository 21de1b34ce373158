"""Experiment plumbing: manifests, train-then-evaluate runs, the ablation grid and summary tables."""

from __future__ import annotations

import csv
import json
import subprocess
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

from . import __version__
from .config import ABLATIONS, TrainConfig
from .corpus import Corpus, corpus_hash
from .metrics import UNITS_NOTE, EvalEmbedder, EvalReport, evaluate, read_report_csv, train_eval_embedder
from .training import Trainer, run_training

SUMMARY_COLUMNS = ("system", "quality_proxy", "speaker_sim", "pitch_std", "variance_ratio")
ABLATION_LABELS = {
    "proposed": "Proposed",
    "baseline": "Baseline",
    "no-text-speaker": "w/o text & speaker",
    "no-speaker": "w/o speaker",
    "no-prosody-disc": "w/o prosody disc",
    "enc-dec-4-4": "Enc-Dec 4:4",
    "enc-only": "Enc-Only 8:0",
}


def build_id() -> str:
    """Git commit of the working tree when available, else the package version."""
    try:
        out = subprocess.run(
            ["git", "rev-parse", "--short", "HEAD"],
            capture_output=True,
            text=True,
            timeout=5,
            cwd=Path(__file__).resolve().parent,
        )
        if out.returncode == 0 and out.stdout.strip():
            return f"git-{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return f"m2gan-{__version__}"


def _now() -> str:
    return time.strftime("%Y-%m-%dT%H:%M:%S%z")


@dataclass
class ExperimentManifest:
    name: str
    config: dict
    corpus_hash: str
    build_id: str
    seed: int
    started: str
    finished: str | None = None
    outputs: dict = field(default_factory=dict)

    def write(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(asdict(self), indent=1, sort_keys=True) + "\n")
        return path

    @classmethod
    def read(cls, path) -> "ExperimentManifest":
        return cls(**json.loads(Path(path).read_text()))


def start_manifest(name: str, cfg: TrainConfig, corpus: Corpus, out_dir) -> ExperimentManifest:
    """Write the run manifest before any training happens."""
    manifest = ExperimentManifest(
        name=name,
        config=asdict(cfg),
        corpus_hash=corpus_hash(corpus),
        build_id=build_id(),
        seed=cfg.seed,
        started=_now(),
        outputs={"losses": "losses.csv", "checkpoints": [f"epoch{e}.ckpt" for e in range(1, cfg.epochs + 1)]},
    )
    manifest.write(Path(out_dir) / "manifest.json")
    return manifest


def finish_manifest(manifest: ExperimentManifest, out_dir, **outputs) -> None:
    """Completion record goes to a sibling file so the start manifest stays untouched."""
    done = replace(manifest, finished=_now(), outputs={**manifest.outputs, **outputs})
    done.write(Path(out_dir) / "manifest.final.json")


def train_system(name: str, cfg: TrainConfig, corpus: Corpus, out_dir) -> Trainer:
    out = Path(out_dir)
    manifest = start_manifest(name, cfg, corpus, out)
    result = run_training(cfg, corpus, out)
    finish_manifest(manifest, out)
    return result.trainer


def write_eval(report: EvalReport, csv_path) -> Path:
    """Per-utterance CSV plus a JSON sidecar with the ground-truth side of the table."""
    path = report.write_csv(csv_path)
    sidecar = {
        "gt_pitch_std_mean": report.gt_pitch_std_mean,
        "reference_sim": report.reference_sim,
        "ground_truth_sim": report.ground_truth_sim,
        "embedder_accuracy": report.embedder_accuracy,
        "units": UNITS_NOTE,
    }
    summary_path(path).write_text(json.dumps(sidecar, indent=1, sort_keys=True) + "\n")
    return path


def summary_path(csv_path) -> Path:
    p = Path(csv_path)
    return p.with_name(p.name + ".summary.json")


def load_eval(csv_path) -> EvalReport:
    rows = read_report_csv(csv_path)
    side = summary_path(csv_path)
    if not side.exists():
        raise FileNotFoundError(f"evaluation summary not found: {side}")
    meta = json.loads(side.read_text())
    return EvalReport(
        rows=rows,
        gt_pitch_std_mean=meta["gt_pitch_std_mean"],
        reference_sim=meta["reference_sim"],
        ground_truth_sim=meta["ground_truth_sim"],
        embedder_accuracy=meta["embedder_accuracy"],
    )


def run_system(
    name: str,
    cfg: TrainConfig,
    corpus: Corpus,
    out_dir,
    embedder: EvalEmbedder | None = None,
) -> EvalReport:
    """Train one configuration and evaluate its final checkpoint."""
    out = Path(out_dir)
    trainer = train_system(name, cfg, corpus, out)
    report = evaluate(trainer.generator, corpus, embedder)
    write_eval(report, out / "eval.csv")
    return report


def _grid_worker(args) -> tuple[str, str]:
    ablation, cfg, corpus, out_dir = args
    run_system(ablation, cfg, corpus, Path(out_dir) / ablation)
    return ablation, str(Path(out_dir) / ablation / "eval.csv")


def run_ablation_grid(cfg: TrainConfig, corpus: Corpus, out_dir, jobs: int = 1) -> dict[str, EvalReport]:
    """All seven presets with a shared seed and corpus; returns reports keyed by preset."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    tasks = [(a, replace(cfg, ablation=a), corpus, out) for a in ABLATIONS]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            list(pool.map(_grid_worker, tasks))
    else:
        embedder = train_eval_embedder(corpus.train_split())
        for a, c, corp, o in tasks:
            run_system(a, c, corp, o / a, embedder)
    reports = {a: load_eval(out / a / "eval.csv") for a in ABLATIONS}
    write_ablation_table(reports, out / "ablation.csv", out / "ablation.md")
    return reports


# -- tables -------------------------------------------------------------------


def _fmt(x: float) -> str:
    return f"{x:.4f}"


def ablation_rows(reports: dict[str, EvalReport]) -> list[list]:
    """Absolute metrics plus deltas against the proposed run."""
    ref = reports["proposed"].system_row("proposed")
    rows = []
    for a in ABLATIONS:
        r = reports[a].system_row(a)
        rows.append(
            [
                a,
                r.quality_proxy,
                r.speaker_sim,
                r.pitch_std,
                r.variance_ratio,
                r.quality_proxy - ref.quality_proxy,
                r.speaker_sim - ref.speaker_sim,
                r.variance_ratio - ref.variance_ratio,
            ]
        )
    return rows


def write_ablation_table(reports: dict[str, EvalReport], csv_path, md_path) -> None:
    header = [
        "system",
        "quality_proxy",
        "speaker_sim",
        "pitch_std",
        "variance_ratio",
        "d_quality_proxy",
        "d_speaker_sim",
        "d_variance_ratio",
    ]
    rows = ablation_rows(reports)
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([row[0]] + [_fmt(x) for x in row[1:]])
    lines = [
        f"Units: {UNITS_NOTE}. quality-proxy is teacher-forced frame MAE (lower is better).",
        "",
        "| system | quality-proxy | speaker sim | pitch std | variance ratio | d quality-proxy | d speaker sim | d variance ratio |",
        "|---|---|---|---|---|---|---|---|",
    ]
    for row in rows:
        lines.append("| " + " | ".join([ABLATION_LABELS[row[0]]] + [_fmt(x) for x in row[1:]]) + " |")
    Path(md_path).write_text("\n".join(lines) + "\n")


def render_summary(baseline_csv, proposed_csv, out_prefix) -> tuple[Path, Path]:
    """Four-row table (Reference, Ground Truth, Baseline, Proposed) as CSV and markdown."""
    missing = [str(p) for p in (baseline_csv, proposed_csv) if not Path(p).exists()]
    missing += [str(summary_path(p)) for p in (baseline_csv, proposed_csv) if Path(p).exists() and not summary_path(p).exists()]
    if missing:
        raise FileNotFoundError("missing evaluation inputs: " + ", ".join(missing))
    base = load_eval(baseline_csv)
    prop = load_eval(proposed_csv)
    rows = [prop.reference_row(), prop.ground_truth_row(), base.system_row("Baseline"), prop.system_row("Proposed")]
    prefix = Path(out_prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    csv_path = prefix.with_name(prefix.name + ".csv")
    md_path = prefix.with_name(prefix.name + ".md")
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SUMMARY_COLUMNS)
        for r in rows:
            w.writerow([r.name, _fmt(r.quality_proxy), _fmt(r.speaker_sim), _fmt(r.pitch_std), _fmt(r.variance_ratio)])
    lines = [
        f"Units: {UNITS_NOTE}. quality-proxy is teacher-forced frame MAE (lower is better; 0 for recorded audio).",
        "",
        "| system | quality-proxy | speaker sim | pitch std | variance ratio |",
        "|---|---|---|---|---|",
    ]
    for r in rows:
        lines.append(f"| {r.name} | {_fmt(r.quality_proxy)} | {_fmt(r.speaker_sim)} | {_fmt(r.pitch_std)} | {_fmt(r.variance_ratio)} |")
    md_path.write_text("\n".join(lines) + "\n")
    return csv_path, md_path

