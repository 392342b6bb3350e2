import json
import xml.etree.ElementTree as ET
from pathlib import Path

import numpy as np
import pytest
import yaml

from gpsm import cli
from gpsm.models import load_model, save_model
from gpsm.msa import Alphabet, load_msa, write_fasta
from gpsm.pipeline import (
    ConfigError,
    StageFailure,
    derive_seed,
    load_config,
    parse_config,
    run_pipeline,
)
from gpsm.potts import gibbs_sample, random_potts
from gpsm.report import MissingArtifact, emit_report

MAX_ORDER = 5


def synthetic_config(tmp, **over):
    save_model(random_potts(8, 3, 0.4, 1.0, seed=1), tmp / "target.json")
    raw = {
        "schema": "gpsm-config-1",
        "seed": 7,
        "output_dir": "out",
        "source": {"kind": "synthetic", "model": "target.json"},
        "split": {"train": 1000, "target": 1000},
        "models": [
            {"kind": "indep"},
            {"kind": "potts", "fit": {"n_chains": 100, "steps_per_round": 20, "max_rounds": 20}},
            {"kind": "svae", "arch": {"preset": "desk", "latent_dim": 2}, "train": {"epochs": 3}},
        ],
        "evaluation": {"n": 2000, "heldout": 100},
        "sampler": {"n_chains": 100, "burn_in_sweeps": 20},
        "metrics": {
            "covariance": {},
            "r20": {"max_order": MAX_ORDER, "sets": 50},
            "hamming": {"pair_budget": 20000},
            "energy": {"samples": 20},
        },
    }
    raw.update(over)
    path = tmp / "config.yaml"
    path.write_text(yaml.safe_dump(raw))
    return path


@pytest.fixture(scope="module")
def synthetic_run(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("syn")
    cfg = load_config(synthetic_config(tmp))
    manifest = run_pipeline(cfg)
    return cfg, manifest


# ---------------------------------------------------------------- validation


def test_seed_derivation_distinct():
    seeds = {derive_seed(1, s, i) for s in range(1, 6) for i in range(4)}
    assert len(seeds) == 20
    assert derive_seed(1, 3, 0) == derive_seed(1, 3, 0) != derive_seed(2, 3, 0)


def test_schema_required(tmp_path):
    with pytest.raises(ConfigError, match="schema"):
        parse_config({"seed": 1}, tmp_path)


def test_unknown_model_kind(tmp_path):
    path = synthetic_config(tmp_path, models=[{"kind": "transformer"}])
    with pytest.raises(ConfigError, match="kind"):
        load_config(path)


def test_split_larger_than_fasta_rejected_before_compute(tmp_path):
    msa = gibbs_sample(random_potts(6, 3, seed=0), 50, n_chains=10, seed=0)
    write_fasta(msa, tmp_path / "nat.fasta")
    path = synthetic_config(tmp_path, source={"kind": "fasta", "path": "nat.fasta",
                                              "alphabet": "ABC"},
                            split={"train": 40, "target": 20})
    with pytest.raises(ConfigError, match="exceed"):
        load_config(path)
    assert not (tmp_path / "out").exists()
    assert cli.main(["validate", "--config", str(path)]) == 2


def test_env_overrides_output_dir(tmp_path, monkeypatch):
    monkeypatch.setenv("GPSM_OUTPUT_DIR", str(tmp_path / "elsewhere"))
    assert load_config(synthetic_config(tmp_path)).output_dir == tmp_path / "elsewhere"


def test_validate_ok(tmp_path, capsys):
    assert cli.main(["validate", "--config", str(synthetic_config(tmp_path))]) == 0
    assert "config OK" in capsys.readouterr().out


# ---------------------------------------------------------------- synthetic run


def test_one_report_per_model_and_metric(synthetic_run):
    cfg, manifest = synthetic_run
    assert manifest["status"] == "ok"
    pairs = {(r["model"], r["metric"]) for r in manifest["reports"]}
    for m in ("indep", "potts", "svae"):
        for metric in ("covariance", "r20", "hamming", "energy"):
            assert (m, metric) in pairs
    assert {("ceiling", "r20"), ("ceiling", "covariance")} <= pairs


def test_artifact_hashes_match_files(synthetic_run):
    from gpsm.metrics import file_sha256
    cfg, manifest = synthetic_run
    for rel, digest in manifest["artifacts"].items():
        assert file_sha256(cfg.output_dir / rel) == digest
    assert set(manifest["stages"].values()) == {"ok"}
    assert manifest["checks"]["train_target_shared_rows"] == 0
    assert "wall_clock_seconds" in json.loads((cfg.output_dir / "run_log.json").read_text())


def test_fitted_models_load(synthetic_run):
    cfg, _ = synthetic_run
    for name in ("indep", "potts", "svae"):
        load_model(cfg.output_dir / "stage3" / f"{name}.json")
        assert load_msa(cfg.output_dir / "stage4" / f"{name}.json").N == 2000


def test_report_outputs(synthetic_run):
    cfg, manifest = synthetic_run
    written = emit_report(cfg.output_dir)
    names = {p.name for p in written}
    assert {"report.json", "r20.csv", "r20.svg", "hamming.svg", "energy.svg"} <= names
    summary = json.loads((cfg.output_dir / "report" / "report.json").read_text())
    entries = sum(len(v) for v in summary.values())
    assert entries == len(manifest["reports"])
    rows = (cfg.output_dir / "report" / "r20.csv").read_text().strip().split("\n")[1:]
    per_model = {}
    for r in rows:
        per_model[r.split(",")[0]] = per_model.get(r.split(",")[0], 0) + 1
    assert per_model == {m: MAX_ORDER - 1 for m in ("ceiling", "indep", "potts", "svae")}
    for svg in cfg.output_dir.glob("report/*.svg"):
        assert ET.parse(svg).getroot().tag.endswith("svg")


def test_report_missing_artifact(synthetic_run, tmp_path):
    cfg, manifest = synthetic_run
    run = tmp_path / "copy"
    run.mkdir()
    (run / "manifest.json").write_text(json.dumps(manifest))
    with pytest.raises(MissingArtifact, match="potts__r20"):
        emit_report(run, "json")
    assert cli.main(["report", "--run-dir", str(run)]) == 2


def test_rerun_reproduces_manifest(synthetic_run, tmp_path, monkeypatch):
    cfg, manifest = synthetic_run
    monkeypatch.setenv("GPSM_OUTPUT_DIR", str(tmp_path / "again"))
    cfg2 = load_config(cfg.base_dir / "config.yaml")
    run_pipeline(cfg2)
    a = (cfg.output_dir / "manifest.json").read_bytes()
    b = (tmp_path / "again" / "manifest.json").read_bytes()
    assert a == b


# ---------------------------------------------------------------- failure handling


def test_stage_failure_writes_flagged_manifest(tmp_path):
    path = synthetic_config(tmp_path, models=[{"kind": "potts", "fit": {"no_such_knob": 1}}],
                            metrics={"covariance": {}})
    cfg = load_config(path)
    with pytest.raises(StageFailure) as info:
        run_pipeline(cfg)
    assert info.value.stage == "fit"
    man = json.loads((cfg.output_dir / "manifest.json").read_text())
    assert man["status"] == "failed" and man["failed_stage"] == "fit" and man["partial"]
    assert "stage2/train.json" in man["artifacts"]
    assert man["stages"]["generate"] == "pending"
    assert cli.main(["run", "--config", str(path)]) == 3


# ---------------------------------------------------------------- natural track


def test_natural_fasta_track(tmp_path):
    msa = gibbs_sample(random_potts(6, 3, 0.5, seed=0), 600, n_chains=50, seed=0)
    write_fasta(msa, tmp_path / "nat.fasta")
    path = synthetic_config(
        tmp_path,
        source={"kind": "fasta", "path": "nat.fasta", "alphabet": "ABC"},
        filter={"cutoff": 0.9},
        split={"train": 150, "target": 50},
        models=[{"kind": "indep"}],
        metrics={"covariance": {}, "r20": {"max_order": 4, "sets": 20}, "energy": {}},
        evaluation={"n": 500},
    )
    cfg = load_config(path)
    man = run_pipeline(cfg)
    assert man["checks"]["filtered_n"] <= 600
    assert man["checks"]["train_target_identical_sequences"] == 0
    assert "skipped" in man["checks"]["energy"]
    assert {(r["model"], r["metric"]) for r in man["reports"]} == {("indep", "covariance"),
                                                                   ("indep", "r20")}


# ---------------------------------------------------------------- CLI subcommands


def test_cli_model_round_trip(tmp_path, capsys):
    t = str(tmp_path / "t.json")
    assert cli.main(["make-target", "--L", "6", "--q", "3", "--seed", "2", "--out", t]) == 0
    train = str(tmp_path / "train.json")
    assert cli.main(["sample", "--model", t, "--n", "2000", "--seed", "1", "--out", train,
                     "--n-chains", "100"]) == 0
    fasta = str(tmp_path / "target.fasta")
    assert cli.main(["sample", "--model", t, "--n", "2000", "--seed", "2", "--out", fasta]) == 0

    ind = str(tmp_path / "ind.json")
    assert cli.main(["fit-indep", "--msa", train, "--out", ind]) == 0
    pot = str(tmp_path / "pot.json")
    hist = tmp_path / "hist.csv"
    assert cli.main(["fit-potts", "--msa", train, "--out", pot, "--history", str(hist),
                     "--n-chains", "100", "--max-rounds", "5"]) == 0
    assert hist.read_text().startswith("round,residual,step")
    vae = str(tmp_path / "vae.json")
    vhist = tmp_path / "vhist.csv"
    assert cli.main(["fit-vae", "--msa", train, "--out", vae, "--history", str(vhist),
                     "--epochs", "2", "--latent-dim", "2"]) == 0
    assert len(vhist.read_text().strip().split("\n")) == 3

    e_t = tmp_path / "e_t.csv"
    e_m = tmp_path / "e_m.csv"
    common = ["--msa", fasta, "--alphabet", "letters:3"]
    assert cli.main(["energy", "--model", t, *common, "--out", str(e_t)]) == 0
    assert cli.main(["energy", "--model", vae, *common, "--estimator", "elbo",
                     "--samples", "10", "--out", str(e_m)]) == 0
    assert cli.main(["metric", "energy", "--target", str(e_t), "--eval", str(e_m)]) == 0
    out = capsys.readouterr().out
    assert json.loads(out)["metric"] == "energy"

    ev = str(tmp_path / "ev.json")
    assert cli.main(["sample", "--model", ind, "--n", "2000", "--seed", "3", "--out", ev]) == 0
    for metric in ("covariance", "r20", "hamming"):
        args = ["metric", metric, "--target", fasta, "--alphabet", "letters:3", "--eval", ev,
                "--max-order", "4", "--sets", "30"]
        assert cli.main(args) == 0
        rep = json.loads(capsys.readouterr().out)
        assert rep["metric"] == metric and len(rep["inputs"]) == 2


def test_cli_extrapolate(capsys):
    assert cli.main(["metric", "extrapolate", "--n0", "6000000", "--rho0", "0.8",
                     "--rho-target", "0.95"]) == 0
    assert json.loads(capsys.readouterr().out)["result"]["n"] == 31_240_385
    assert cli.main(["metric", "extrapolate", "--n0", "10", "--rho0", "0.8",
                     "--rho-target", "1.0"]) == 2


def test_cli_marginals_csv(tmp_path, capsys):
    msa = gibbs_sample(random_potts(3, 2, seed=0), 100, n_chains=10, seed=0)
    write_fasta(msa, tmp_path / "m.fasta")
    assert cli.main(["marginals", "--msa", str(tmp_path / "m.fasta"), "--alphabet", "AB",
                     "--kind", "bivariate"]) == 0
    lines = capsys.readouterr().out.strip().split("\n")
    assert lines[0] == "i,j,alpha,beta,value" and len(lines) == 1 + 3 * 4
    total = sum(float(l.split(",")[-1]) for l in lines[1:] if l.startswith("0,1,"))
    assert total == pytest.approx(1.0)
