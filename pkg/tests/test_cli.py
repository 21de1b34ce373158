import csv
import json
import subprocess
import sys
from pathlib import Path

import pytest

from m2gan.cli import EXIT_DATA, EXIT_DIVERGED, EXIT_OK, EXIT_USAGE, build_parser, main
from m2gan.corpus import load_records
from m2gan.experiments import ExperimentManifest

ROOT = Path(__file__).resolve().parents[1]
SMOKE_CFG = ROOT / "configs" / "smoke.cfg"


def columns(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return {k: [float(r[k]) for r in rows] for k in rows[0]}


@pytest.fixture(scope="module")
def tiny_corpus(tmp_path_factory):
    out = tmp_path_factory.mktemp("data") / "tiny.m2c"
    assert main(["gen-data", "--out", str(out), "--n-speakers", "4", "--n-utterances", "24", "--seed", "3"]) == EXIT_OK
    return out


@pytest.fixture(scope="module")
def trained(tiny_corpus, tmp_path_factory):
    runs = {}
    root = tmp_path_factory.mktemp("runs")
    for name, extra in [("baseline", ["--baseline"]), ("proposed", []), ("no-prosody-disc", ["--ablate", "no-prosody-disc"]), ("enc-only", ["--ablate", "enc-only"])]:
        out = root / name
        code = main(["train", "--config", str(SMOKE_CFG), "--corpus", str(tiny_corpus), "--out", str(out)] + extra)
        assert code == EXIT_OK
        runs[name] = out
    return runs


def test_default_gen_data_flags():
    args = build_parser().parse_args(["gen-data"])
    assert (args.n_utterances, args.n_speakers, args.seed) == (2000, 16, 0)


def test_gen_data_tiny_and_hash_stable(tiny_corpus, tmp_path):
    corpus = load_records(tiny_corpus)
    assert len(corpus) == 24 and corpus.spec.n_speakers == 4
    first = json.loads(Path(str(tiny_corpus) + ".manifest.json").read_text())
    again = tmp_path / "again.m2c"
    assert main(["gen-data", "--out", str(again), "--n-speakers", "4", "--n-utterances", "24", "--seed", "3"]) == EXIT_OK
    second = json.loads(Path(str(again) + ".manifest.json").read_text())
    assert first["corpus_hash"] == second["corpus_hash"]
    assert again.read_bytes() == tiny_corpus.read_bytes()


def test_gen_data_respects_cache_env(tmp_path, monkeypatch):
    monkeypatch.setenv("M2GAN_CACHE", str(tmp_path))
    assert main(["gen-data", "--n-speakers", "2", "--n-utterances", "10"]) == EXIT_OK
    assert len(list(tmp_path.glob("*.m2c"))) == 1


def test_gen_data_unwritable_path(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert main(["gen-data", "--out", str(blocker / "sub" / "c.m2c"), "--n-utterances", "2"]) == EXIT_DATA


def test_baseline_has_no_adversarial_columns(trained):
    cols = columns(trained["baseline"] / "losses.csv")
    for k in ("l_aa", "l_ap", "l_da", "l_dp"):
        assert all(v == 0.0 for v in cols[k])
    assert all(v > 0 for v in cols["l_ga"])


def test_no_prosody_disc_has_zero_l_dp(trained):
    cols = columns(trained["no-prosody-disc"] / "losses.csv")
    assert all(v == 0.0 for v in cols["l_dp"])
    assert any(v > 0 for v in cols["l_da"])


def test_enc_only_manifest_has_no_cross_attention(trained):
    manifest = json.loads((trained["enc-only"] / "epoch3.ckpt.manifest.json").read_text())
    disc = [p["name"] for p in manifest["parameters"] if p["name"].startswith("disc_")]
    assert disc and not any("cross_attn" in n for n in disc)
    proposed = json.loads((trained["proposed"] / "epoch3.ckpt.manifest.json").read_text())
    assert any("cross_attn" in p["name"] for p in proposed["parameters"] if p["name"].startswith("disc_"))


def test_run_manifest_records_everything_needed(trained, tiny_corpus):
    m = ExperimentManifest.read(trained["proposed"] / "manifest.json")
    corpus_manifest = json.loads(Path(str(tiny_corpus) + ".manifest.json").read_text())
    assert m.corpus_hash == corpus_manifest["corpus_hash"]
    assert m.seed == m.config["seed"] == 0
    assert m.config["d_hidden"] == 16 and m.build_id
    final = ExperimentManifest.read(trained["proposed"] / "manifest.final.json")
    assert final.finished and final.started == m.started


def test_eval_and_report(trained, tiny_corpus, tmp_path):
    for name in ("baseline", "proposed"):
        code = main(["eval", "--checkpoint", str(trained[name] / "epoch3.ckpt"), "--corpus", str(tiny_corpus), "--out", str(tmp_path / f"{name}.csv")])
        assert code == EXIT_OK
    args = ["report", "--baseline", str(tmp_path / "baseline.csv"), "--proposed", str(tmp_path / "proposed.csv"), "--out", str(tmp_path / "summary")]
    assert main(args) == EXIT_OK
    md = (tmp_path / "summary.md").read_bytes()
    table = (tmp_path / "summary.csv").read_text().splitlines()
    assert [row.split(",")[0] for row in table[1:]] == ["Reference", "Ground Truth", "Baseline", "Proposed"]
    assert b"quality-proxy" in md and b"MOS" not in md
    assert main(args) == EXIT_OK
    assert (tmp_path / "summary.md").read_bytes() == md


def test_report_missing_input_names_path(tmp_path, capsys):
    missing = tmp_path / "absent_baseline.csv"
    code = main(["report", "--baseline", str(missing), "--proposed", str(missing), "--out", str(tmp_path / "s")])
    assert code == EXIT_DATA
    assert str(missing) in capsys.readouterr().err


def test_exit_codes(tiny_corpus, tmp_path):
    assert main([]) == EXIT_USAGE
    assert main(["train", "--corpus", str(tiny_corpus)]) == EXIT_USAGE
    assert main(["train", "--corpus", str(tiny_corpus), "--out", str(tmp_path), "--baseline", "--ablate", "enc-only"]) == EXIT_USAGE
    assert main(["train", "--corpus", str(tmp_path / "none.m2c"), "--out", str(tmp_path)]) == EXIT_DATA
    bad = tmp_path / "bad.m2c"
    bad.write_text("M2C1\t{}\n{broken\n")
    assert main(["eval", "--checkpoint", str(tmp_path / "x.ckpt"), "--corpus", str(bad), "--out", str(tmp_path / "e.csv")]) == EXIT_DATA
    diverge = tmp_path / "diverge.cfg"
    diverge.write_text(SMOKE_CFG.read_text() + "divergence_threshold=0.001\n")
    code = main(["train", "--config", str(diverge), "--corpus", str(tiny_corpus), "--out", str(tmp_path / "d")])
    assert code == EXIT_DIVERGED


def test_module_entry_point():
    out = subprocess.run([sys.executable, "-m", "m2gan", "--help"], capture_output=True, text=True)
    assert out.returncode == 0
    for cmd in ("gen-data", "train", "eval", "ablate", "report"):
        assert cmd in out.stdout


@pytest.mark.slow
def test_ablate_grid_rows_and_self_delta(tiny_corpus, tmp_path):
    assert main(["ablate", "--config", str(SMOKE_CFG), "--corpus", str(tiny_corpus), "--out", str(tmp_path)]) == EXIT_OK
    with open(tmp_path / "ablation.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert [r["system"] for r in rows] == ["proposed", "baseline", "no-text-speaker", "no-speaker", "no-prosody-disc", "enc-dec-4-4", "enc-only"]
    proposed = rows[0]
    assert all(float(proposed[k]) == 0.0 for k in ("d_quality_proxy", "d_speaker_sim", "d_variance_ratio"))
    table = [line for line in (tmp_path / "ablation.md").read_text().splitlines() if line.startswith("|")]
    assert len(table) == 2 + 7  # header, separator, one row per system
