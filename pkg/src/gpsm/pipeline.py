"""
Five-stage generative-capacity experiment driven by a YAML config.

1. sequester  load a natural FASTA or sample from a stored target model
2. split      identity-filter and split natural data into training/target
3. fit        fit every rostered model on the training alignment
4. generate   sample an evaluation alignment from every fitted model
5. measure    compute the rostered metrics against the target alignment

Every artifact lands under the output directory and is listed with its
sha256 in ``manifest.json``. Wall-clock timings go to ``run_log.json`` so the
manifest itself is byte-reproducible.
"""

from __future__ import annotations

import copy
import csv
import hashlib
import io
import json
import logging
import os
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import yaml

from . import indep, metrics, models, potts, vae
from .msa import (
    Alphabet,
    Msa,
    filter_by_identity,
    hamming_distribution,
    load_msa,
    msa_covariances,
    msa_to_json,
    split_disjoint,
)

logger = logging.getLogger(__name__)

CONFIG_SCHEMA = "gpsm-config-1"
MANIFEST_SCHEMA = "gpsm-manifest-1"
METRICS = ("covariance", "r20", "hamming", "energy")
STAGES = ("sequester", "split", "fit", "generate", "measure")

DEFAULT_METRICS = {
    "covariance": {},
    "r20": {"max_order": 10, "sets": 3000, "top_k": 20},
    "hamming": {"pair_budget": 1_000_000},
    "energy": {"estimator": "importance", "samples": 1000},
}


class ConfigError(ValueError):
    pass


class StageFailure(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage '{stage}' failed: {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass
class ModelSpec:
    name: str
    kind: str
    options: dict = field(default_factory=dict)


@dataclass
class PipelineConfig:
    seed: int
    output_dir: Path
    source: dict
    train_size: int
    target_size: int
    models: list
    eval_size: int = 50_000
    heldout_size: int = 1000
    filter_cutoff: Optional[float] = None
    sampler: dict = field(default_factory=dict)
    metrics: dict = field(default_factory=dict)
    base_dir: Path = Path(".")
    raw: dict = field(default_factory=dict)

    @property
    def synthetic(self) -> bool:
        return self.source["kind"] == "synthetic"

    def resolve(self, p) -> Path:
        p = Path(p)
        return p if p.is_absolute() else self.base_dir / p


def alphabet_from_spec(spec) -> Alphabet:
    if spec is None or spec == "protein":
        return Alphabet.protein()
    if isinstance(spec, str) and spec.startswith("letters:"):
        return Alphabet.letters(int(spec.split(":", 1)[1]))
    if isinstance(spec, dict):
        return Alphabet(spec["symbols"], spec.get("gap_symbol"))
    return Alphabet(str(spec))


def _positive_int(d: dict, key: str, where: str, default=None) -> int:
    v = d.get(key, default)
    if not isinstance(v, int) or isinstance(v, bool) or v < 1:
        raise ConfigError(f"{where}.{key} must be a positive integer, got {v!r}")
    return v


def _count_fasta_records(path: Path) -> int:
    with open(path) as fh:
        return sum(1 for line in fh if line.startswith(">"))


def parse_config(raw: dict, base_dir: Path = Path(".")) -> PipelineConfig:
    """Validate a config mapping; raises :class:`ConfigError` on any problem."""
    if not isinstance(raw, dict):
        raise ConfigError("config must be a mapping")
    if raw.get("schema") != CONFIG_SCHEMA:
        raise ConfigError(f"config schema must be {CONFIG_SCHEMA!r}, got {raw.get('schema')!r}")
    unknown = set(raw) - {"schema", "seed", "output_dir", "source", "filter", "split",
                          "models", "evaluation", "metrics", "sampler"}
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    seed = raw.get("seed")
    if not isinstance(seed, int) or seed < 0:
        raise ConfigError("seed must be a non-negative integer")

    source = dict(raw.get("source") or {})
    kind = source.get("kind")
    if kind == "synthetic":
        if "model" not in source:
            raise ConfigError("synthetic source needs a 'model' path")
    elif kind == "fasta":
        if "path" not in source:
            raise ConfigError("fasta source needs a 'path'")
        try:
            alphabet_from_spec(source.get("alphabet"))
        except (ValueError, KeyError) as exc:
            raise ConfigError(f"bad alphabet: {exc}")
    else:
        raise ConfigError(f"source.kind must be 'synthetic' or 'fasta', got {kind!r}")

    split = raw.get("split") or {}
    train_size = _positive_int(split, "train", "split")
    target_size = _positive_int(split, "target", "split")

    filt = raw.get("filter") or {}
    cutoff = filt.get("cutoff")
    if cutoff is not None:
        if kind != "fasta":
            raise ConfigError("identity filtering applies to fasta sources only")
        if not isinstance(cutoff, (int, float)) or not 0 < cutoff < 1:
            raise ConfigError("filter.cutoff must lie in (0, 1)")

    roster = raw.get("models")
    if not roster:
        raise ConfigError("models roster is empty")
    specs, names = [], set()
    for k, m in enumerate(roster):
        if not isinstance(m, dict) or "kind" not in m:
            raise ConfigError(f"models[{k}] needs a 'kind'")
        if m["kind"] not in models.KINDS:
            raise ConfigError(f"models[{k}].kind must be one of {models.KINDS}, got {m['kind']!r}")
        name = str(m.get("name", m["kind"]))
        if name in names or name in ("target", "ceiling"):
            raise ConfigError(f"duplicate or reserved model name {name!r}")
        names.add(name)
        opts = {key: v for key, v in m.items() if key not in ("kind", "name")}
        specs.append(ModelSpec(name, m["kind"], opts))

    ev = raw.get("evaluation") or {}
    eval_size = _positive_int(ev, "n", "evaluation", 50_000)
    heldout = _positive_int(ev, "heldout", "evaluation", 1000)

    mets = raw.get("metrics")
    if mets is None:
        mets = copy.deepcopy(DEFAULT_METRICS)
    if not isinstance(mets, dict) or not mets:
        raise ConfigError("metrics must be a non-empty mapping")
    resolved_metrics = {}
    for name, params in mets.items():
        if name not in METRICS:
            raise ConfigError(f"unknown metric {name!r}; choose from {METRICS}")
        p = dict(DEFAULT_METRICS[name])
        p.update(params or {})
        resolved_metrics[name] = p
    if "r20" in resolved_metrics:
        r = resolved_metrics["r20"]
        if not isinstance(r["max_order"], int) or r["max_order"] < 2:
            raise ConfigError("metrics.r20.max_order must be an integer >= 2")

    cfg = PipelineConfig(
        seed=seed,
        output_dir=Path(os.environ.get("GPSM_OUTPUT_DIR") or raw.get("output_dir") or "gpsm_out"),
        source=source,
        train_size=train_size,
        target_size=target_size,
        models=specs,
        eval_size=eval_size,
        heldout_size=heldout,
        filter_cutoff=cutoff,
        sampler=dict(raw.get("sampler") or {}),
        metrics=resolved_metrics,
        base_dir=base_dir,
        raw=raw,
    )
    if not cfg.output_dir.is_absolute():
        cfg.output_dir = base_dir / cfg.output_dir

    if kind == "fasta":
        path = cfg.resolve(source["path"])
        if not path.exists():
            raise ConfigError(f"input FASTA {path} not found")
        n = _count_fasta_records(path)
        if train_size + target_size > n:
            raise ConfigError(
                f"split sizes {train_size} + {target_size} exceed the {n} input sequences"
            )
    else:
        path = cfg.resolve(source["model"])
        if not path.exists():
            raise ConfigError(f"target model {path} not found")
    return cfg


def load_config(path) -> PipelineConfig:
    path = Path(path)
    try:
        with open(path) as fh:
            raw = yaml.safe_load(fh)
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}")
    return parse_config(raw, path.parent)


def derive_seed(master: int, stage: int, index: int = 0) -> int:
    """Independent 32-bit seed per (stage, index)."""
    return int(np.random.SeedSequence([master, stage, index]).generate_state(1)[0])


def _sha256_bytes(b: bytes) -> str:
    return hashlib.sha256(b).hexdigest()


class _Run:
    """Mutable state of one pipeline execution."""

    def __init__(self, cfg: PipelineConfig):
        self.cfg = cfg
        self.out = cfg.output_dir
        self.artifacts: dict = {}
        self.seeds: dict = {}
        self.reports: list = []
        self.checks: dict = {}
        self.stage_status: dict = {s: "pending" for s in STAGES}
        self.timings: dict = {}

    def seed(self, label: str, stage: int, index: int = 0) -> int:
        s = derive_seed(self.cfg.seed, stage, index)
        self.seeds[label] = s
        return s

    def write(self, rel: str, data) -> Path:
        path = self.out / rel
        path.parent.mkdir(parents=True, exist_ok=True)
        if isinstance(data, str):
            data = data.encode()
        with open(path, "wb") as fh:
            fh.write(data)
        self.artifacts[rel] = _sha256_bytes(data)
        return path

    def write_json(self, rel: str, obj) -> Path:
        return self.write(rel, json.dumps(obj, sort_keys=True, separators=(",", ":")))

    def write_msa(self, rel: str, msa: Msa) -> Path:
        return self.write_json(rel, msa_to_json(msa))


def _sampler_opts(cfg: PipelineConfig) -> dict:
    allowed = {"n_chains", "burn_in_sweeps", "thin_sweeps"}
    bad = set(cfg.sampler) - allowed
    if bad:
        raise ValueError(f"unknown sampler options {sorted(bad)}")
    return dict(cfg.sampler)


def _fit_model(spec: ModelSpec, train: Msa, seed: int):
    """Fit one rostered model; returns (model, history_csv or None)."""
    opts = dict(spec.options)
    if spec.kind == "indep":
        return indep.fit_indep(train, opts.get("pseudocount")), None
    if spec.kind == "potts":
        fit_opts = dict(opts.get("fit") or {})
        fit_opts["seed"] = seed
        res = potts.fit_potts(train, potts.FitConfig(**fit_opts))
        if not res.converged:
            logger.warning("model %s did not converge; keeping best parameters", spec.name)
        return res.params, res.history_csv()
    arch_opts = dict(opts.get("arch") or {})
    preset = arch_opts.pop("preset", "desk")
    if preset == "desk":
        arch = vae.VaeArch.desk(train.L, train.q, **arch_opts)
    elif preset == "full":
        arch = vae.VaeArch.full(train.L, train.q, **arch_opts)
    else:
        arch = vae.VaeArch(train.L, train.q, **arch_opts)
    train_opts = dict(opts.get("train") or {})
    train_opts["seed"] = seed
    schedule = train_opts.pop("preset", "default")
    factory = vae.TrainConfig.desk if schedule == "desk" else vae.TrainConfig
    res = vae.train_vae(train, arch, factory(**train_opts))
    return res.model, res.history_csv()


def _hist_csv(hist) -> str:
    rows = ["distance,count"] + [f"{d},{c}" for d, c in enumerate(hist.counts)]
    return "\n".join(rows) + "\n"


def run_pipeline(cfg: PipelineConfig) -> dict:
    """Execute all stages and write ``manifest.json``; returns the manifest.

    On a stage failure the manifest is still written (status ``failed``,
    partial artifacts listed) and :class:`StageFailure` is raised.
    """
    threads = os.environ.get("GPSM_THREADS")
    if threads:
        import torch
        torch.set_num_threads(int(threads))
    run = _Run(cfg)
    run.out.mkdir(parents=True, exist_ok=True)
    state: dict = {}
    error = None
    for k, stage in enumerate(STAGES, start=1):
        t0 = time.perf_counter()
        try:
            globals()[f"_stage_{stage}"](run, state, k)
        except Exception as exc:  # noqa: BLE001 - reported through the manifest
            run.stage_status[stage] = "failed"
            error = StageFailure(stage, exc)
            logger.error("%s", error)
            break
        finally:
            run.timings[stage] = round(time.perf_counter() - t0, 3)
        run.stage_status[stage] = "ok"

    manifest = _manifest(run, error)
    with open(run.out / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(run.out / "run_log.json", "w") as fh:
        json.dump({"wall_clock_seconds": run.timings}, fh, indent=2)
        fh.write("\n")
    if error is not None:
        raise error
    return manifest


def _manifest(run: _Run, error) -> dict:
    cfg = run.cfg
    raw = copy.deepcopy(cfg.raw)
    raw.pop("output_dir", None)
    resolved = {
        "raw": raw,
        "train_size": cfg.train_size,
        "target_size": cfg.target_size,
        "eval_size": cfg.eval_size,
        "heldout_size": cfg.heldout_size,
        "filter_cutoff": cfg.filter_cutoff,
        "sampler": cfg.sampler,
        "metrics": cfg.metrics,
        "models": [{"name": m.name, "kind": m.kind, "options": m.options} for m in cfg.models],
    }
    man = {
        "schema": MANIFEST_SCHEMA,
        "config": resolved,
        "master_seed": cfg.seed,
        "seeds": run.seeds,
        "stages": run.stage_status,
        "artifacts": dict(sorted(run.artifacts.items())),
        "reports": run.reports,
        "checks": run.checks,
        "status": "ok" if error is None else "failed",
    }
    if error is not None:
        man["failed_stage"] = error.stage
        man["error"] = str(error)
        man["partial"] = True
    return man


# --------------------------------------------------------------------------
# stages


def _stage_sequester(run: _Run, state: dict, k: int) -> None:
    cfg = run.cfg
    if cfg.synthetic:
        path = cfg.resolve(cfg.source["model"])
        with open(path, "rb") as fh:
            run.checks["target_model_sha256"] = _sha256_bytes(fh.read())
        target_model = models.load_model(path)
        state["target_model"] = target_model
        opts = _sampler_opts(cfg)
        draws = {
            "train": cfg.train_size,
            "target": cfg.target_size,
            "ceiling": cfg.eval_size if "r20" in cfg.metrics else 0,
            "heldout": cfg.heldout_size if "energy" in cfg.metrics else 0,
        }
        for idx, (name, n) in enumerate(draws.items()):
            if n == 0:
                continue
            msa = models.sample_model(target_model, n, run.seed(f"sequester.{name}", k, idx), opts)
            msa = Msa(msa.data, msa.alphabet, tuple(f"{name}_{i}" for i in range(n)))
            state[name] = msa
            if name in ("ceiling", "heldout"):
                run.write_msa(f"stage1/{name}.json", msa)
    else:
        path = cfg.resolve(cfg.source["path"])
        with open(path, "rb") as fh:
            run.checks["input_fasta_sha256"] = _sha256_bytes(fh.read())
        alphabet = alphabet_from_spec(cfg.source.get("alphabet"))
        state["natural"] = load_msa(path, alphabet)


def _stage_split(run: _Run, state: dict, k: int) -> None:
    cfg = run.cfg
    if not cfg.synthetic:
        msa = state.pop("natural")
        if cfg.filter_cutoff is not None:
            msa = filter_by_identity(msa, cfg.filter_cutoff, run.seed("split.filter", k, 0))
            run.checks["filtered_n"] = msa.N
        train, target = split_disjoint(
            msa, [cfg.train_size, cfg.target_size], run.seed("split.partition", k, 1)
        )
        state["train"], state["target"] = train, target
    train, target = state["train"], state["target"]
    shared_ids = set(train.ids) & set(target.ids)
    if shared_ids:
        raise RuntimeError(f"training and target alignments share {len(shared_ids)} rows")
    run.checks["train_target_shared_rows"] = 0
    run.checks["train_target_identical_sequences"] = len(
        set(train.row_hashes()) & set(target.row_hashes())
    )
    run.write_msa("stage2/train.json", train)
    run.write_msa("stage2/target.json", target)


def _stage_fit(run: _Run, state: dict, k: int) -> None:
    fitted = {}
    for idx, spec in enumerate(run.cfg.models):
        model, history = _fit_model(spec, state["train"], run.seed(f"fit.{spec.name}", k, idx))
        fitted[spec.name] = model
        run.write_json(f"stage3/{spec.name}.json", models.model_to_json(model))
        if history is not None:
            run.write(f"stage3/{spec.name}_history.csv", history)
    state["fitted"] = fitted


def _stage_generate(run: _Run, state: dict, k: int) -> None:
    opts = _sampler_opts(run.cfg)
    evals = {}
    for idx, spec in enumerate(run.cfg.models):
        model = state["fitted"][spec.name]
        msa = models.sample_model(model, run.cfg.eval_size, run.seed(f"generate.{spec.name}", k, idx), opts)
        evals[spec.name] = msa
        run.write_msa(f"stage4/{spec.name}.json", msa)
    state["eval"] = evals


def _report(run: _Run, model: str, metric: str, result, inputs: dict, seed=None, params=None):
    rep = metrics.MetricReport(metric, result, inputs, seed, params or {}, model)
    rel = f"stage5/{model}__{metric}.json"
    run.write(rel, rep.to_json() + "\n")
    run.reports.append({"model": model, "metric": metric, "path": rel})


def _stage_measure(run: _Run, state: dict, k: int) -> None:
    cfg = run.cfg
    target: Msa = state["target"]
    evals: dict = state["eval"]
    compare = dict(evals)
    if cfg.synthetic and "ceiling" in state:
        compare = {"ceiling": state["ceiling"], **evals}
    fp = {name: m.fingerprint() for name, m in compare.items()}
    fp_target = target.fingerprint()

    if "covariance" in cfg.metrics:
        c_target = msa_covariances(target)
        for name, ev in compare.items():
            rho = metrics.covariance_correlation(c_target, msa_covariances(ev))
            _report(run, name, "covariance", {"rho": rho}, {"target": fp_target, "eval": fp[name]})

    if "r20" in cfg.metrics:
        p = cfg.metrics["r20"]
        max_order = min(p["max_order"], target.L)
        seed = run.seed("measure.r20", k, 0)
        for name, ev in compare.items():
            rep = metrics.r20(target, ev, max_order, p["sets"], p["top_k"], seed)
            _report(run, name, "r20", rep.to_dict(), {"target": fp_target, "eval": fp[name]},
                    seed, {"max_order": max_order, "sets": p["sets"], "top_k": p["top_k"]})

    if "hamming" in cfg.metrics:
        budget = cfg.metrics["hamming"].get("pair_budget")
        seed = run.seed("measure.hamming", k, 1)
        h_target = hamming_distribution(target, budget, seed)
        run.write("stage5/target__hamming.csv", _hist_csv(h_target))
        for name, ev in compare.items():
            h = hamming_distribution(ev, budget, seed)
            run.write(f"stage5/{name}__hamming.csv", _hist_csv(h))
            result = {
                "tvd": metrics.hamming_tvd(h_target, h),
                "target_counts": h_target.counts.tolist(),
                "eval_counts": h.counts.tolist(),
                "target_mode": int(np.argmax(h_target.counts)),
                "eval_mode": int(np.argmax(h.counts)),
            }
            _report(run, name, "hamming", result, {"target": fp_target, "eval": fp[name]},
                    seed, {"pair_budget": budget})

    if "energy" in cfg.metrics:
        if not cfg.synthetic:
            run.checks["energy"] = "skipped: no reference energies for natural data"
        else:
            p = cfg.metrics["energy"]
            held: Msa = state["heldout"]
            seed = run.seed("measure.energy", k, 2)
            e_target = models.model_energies(state["target_model"], held.data, p["estimator"],
                                             p["samples"], seed)
            for name in evals:
                e_model = models.model_energies(state["fitted"][name], held.data, p["estimator"],
                                                p["samples"], seed)
                buf = io.StringIO()
                w = csv.writer(buf, lineterminator="\n")
                w.writerow(["target", "model"])
                w.writerows([[f"{a:.12g}", f"{b:.12g}"] for a, b in zip(e_target, e_model)])
                run.write(f"stage5/{name}__energies.csv", buf.getvalue())
                rho = metrics.energy_correlation(e_target, e_model)
                _report(run, name, "energy", {"rho": rho, "n": int(held.N)},
                        {"heldout": held.fingerprint()}, seed,
                        {"estimator": p["estimator"], "samples": p["samples"]})
