"""Command-line entry point ``gpsm``.

Exit codes: 0 success, 2 configuration or input error, 3 pipeline stage failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import yaml

from . import __version__, indep, metrics, models, potts, vae
from .msa import (
    AlignmentError,
    bivariate_marginals,
    covariances,
    hamming_distribution,
    load_msa,
    msa_covariances,
    save_msa,
    table_to_csv,
    univariate_marginals,
)
from .pipeline import ConfigError, StageFailure, alphabet_from_spec, load_config, run_pipeline
from .report import FORMATS, MissingArtifact, emit_report

EXIT_OK, EXIT_CONFIG, EXIT_STAGE = 0, 2, 3

logger = logging.getLogger("gpsm")


def _read_msa(args, path):
    alphabet = alphabet_from_spec(args.alphabet) if not str(path).endswith(".json") else None
    return load_msa(path, alphabet)


def _write_text(path, text: str) -> None:
    if path in (None, "-"):
        sys.stdout.write(text)
    else:
        with open(path, "w") as fh:
            fh.write(text)


def _load_options(path) -> dict:
    if path is None:
        return {}
    with open(path) as fh:
        opts = yaml.safe_load(fh) or {}
    if not isinstance(opts, dict):
        raise ConfigError(f"{path} must hold a mapping of options")
    return opts


# --------------------------------------------------------------------------
# model commands


def cmd_fit_indep(args) -> int:
    msa = _read_msa(args, args.msa)
    models.save_model(indep.fit_indep(msa, args.pseudocount), args.out)
    return EXIT_OK


def cmd_fit_potts(args) -> int:
    msa = _read_msa(args, args.msa)
    opts = _load_options(args.options)
    for key in ("seed", "max_rounds", "lam", "step_size", "n_chains", "pseudocount"):
        val = getattr(args, key)
        if val is not None:
            opts[key] = val
    try:
        config = potts.FitConfig(**opts)
    except TypeError as exc:
        raise ConfigError(str(exc))
    res = potts.fit_potts(msa, config)
    models.save_model(res.params, args.out)
    if args.history:
        _write_text(args.history, res.history_csv())
    if not res.converged:
        logger.warning("fit did not reach the convergence tolerance; wrote best parameters")
    return EXIT_OK


def cmd_fit_vae(args) -> int:
    msa = _read_msa(args, args.msa)
    arch_kw = {}
    if args.latent_dim is not None:
        arch_kw["latent_dim"] = args.latent_dim
    if args.dropout is not None:
        arch_kw["dropout_rate"] = args.dropout
    if args.no_batch_norm:
        arch_kw["use_batch_norm"] = False
    factory = vae.VaeArch.full if args.preset == "full" else vae.VaeArch.desk
    arch = factory(msa.L, msa.q, **arch_kw)
    train_kw = {"seed": args.seed}
    if args.epochs is not None:
        train_kw["epochs"] = args.epochs
    if args.batch_size is not None:
        train_kw["batch_size"] = args.batch_size
    schedule = vae.TrainConfig.desk if args.schedule == "desk" else vae.TrainConfig
    res = vae.train_vae(msa, arch, schedule(**train_kw))
    models.save_model(res.model, args.out)
    if args.history:
        _write_text(args.history, res.history_csv())
    return EXIT_OK


def cmd_make_target(args) -> int:
    if args.kind == "random":
        params = potts.random_potts(args.L, args.q, args.coupling_scale, args.field_scale, args.seed)
    else:
        params = potts.low_rank_potts(args.L, args.q, args.patterns, args.strength, seed=args.seed)
    models.save_model(params, args.out)
    return EXIT_OK


def cmd_sample(args) -> int:
    model = models.load_model(args.model)
    sampler = {}
    if args.n_chains is not None:
        sampler["n_chains"] = args.n_chains
    if args.burn_in is not None:
        sampler["burn_in_sweeps"] = args.burn_in
    if args.thin is not None:
        sampler["thin_sweeps"] = args.thin
    save_msa(models.sample_model(model, args.n, args.seed, sampler), args.out)
    return EXIT_OK


def cmd_energy(args) -> int:
    model = models.load_model(args.model)
    msa = _read_msa(args, args.msa)
    e = models.model_energies(model, msa.data, args.estimator, args.samples, args.seed)
    lines = ["id,energy"] + [f"{i},{v:.12g}" for i, v in zip(msa.ids, e)]
    _write_text(args.out, "\n".join(lines) + "\n")
    return EXIT_OK


def cmd_marginals(args) -> int:
    msa = _read_msa(args, args.msa)
    if args.kind == "univariate":
        table = univariate_marginals(msa, args.pseudocount)
    elif args.kind == "bivariate":
        table = bivariate_marginals(msa, args.pseudocount)
    else:
        bi = bivariate_marginals(msa, args.pseudocount)
        table = covariances(bi.univariate(), bi)
    _write_text(args.out, table_to_csv(table))
    return EXIT_OK


# --------------------------------------------------------------------------
# metrics


def _read_energies(path) -> np.ndarray:
    return np.loadtxt(path, delimiter=",", skiprows=1, usecols=1, ndmin=1)


def cmd_metric(args) -> int:
    name = args.metric
    inputs, params, seed = {}, {}, None
    if name == "extrapolate":
        if None in (args.n0, args.rho0, args.rho_target):
            raise ConfigError("extrapolate needs --n0, --rho0 and --rho-target")
        result = {"n": metrics.extrapolate_msa_size(args.n0, args.rho0, args.rho_target)}
        params = {"n0": args.n0, "rho0": args.rho0, "rho_target": args.rho_target}
    else:
        if args.target is None or args.eval is None:
            raise ConfigError(f"metric {name} needs --target and --eval")
        inputs = {"target": metrics.file_sha256(args.target), "eval": metrics.file_sha256(args.eval)}
        if name == "energy":
            result = {"rho": metrics.energy_correlation(_read_energies(args.target),
                                                        _read_energies(args.eval))}
        else:
            target = _read_msa(args, args.target)
            ev = _read_msa(args, args.eval)
            if name == "covariance":
                result = {"rho": metrics.covariance_correlation(msa_covariances(target),
                                                                msa_covariances(ev))}
            elif name == "r20":
                seed = args.seed
                max_order = min(args.max_order, target.L)
                params = {"max_order": max_order, "sets": args.sets, "top_k": args.top_k}
                result = metrics.r20(target, ev, max_order, args.sets, args.top_k, seed).to_dict()
            else:
                seed = args.seed
                budget = args.pair_budget
                params = {"pair_budget": budget}
                ht = hamming_distribution(target, budget, seed)
                he = hamming_distribution(ev, budget, seed)
                result = {
                    "tvd": metrics.hamming_tvd(ht, he),
                    "target_counts": ht.counts.tolist(),
                    "eval_counts": he.counts.tolist(),
                }
    report = metrics.MetricReport(name, result, inputs, seed, params).stamp()
    _write_text(args.out, report.to_json() + "\n")
    return EXIT_OK


# --------------------------------------------------------------------------
# pipeline


def cmd_validate(args) -> int:
    cfg = load_config(args.config)
    print(f"config OK: {len(cfg.models)} models, metrics {sorted(cfg.metrics)}, "
          f"output {cfg.output_dir}")
    return EXIT_OK


def cmd_run(args) -> int:
    cfg = load_config(args.config)
    try:
        run_pipeline(cfg)
    except StageFailure as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_STAGE
    if not args.no_report:
        emit_report(cfg.output_dir, FORMATS)
    print(f"wrote {cfg.output_dir / 'manifest.json'}")
    return EXIT_OK


def cmd_report(args) -> int:
    for p in emit_report(args.run_dir, args.format):
        print(p)
    return EXIT_OK


def _pair_budget(text: str):
    if text == "all":
        return "all"
    return int(text)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gpsm", description="Fit, sample and score sequence models.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def msa_args(sp, name="--msa"):
        sp.add_argument(name, required=True, help="MSA as .json container or FASTA")
        sp.add_argument("--alphabet", default="protein",
                        help="FASTA alphabet: 'protein', 'letters:Q' or a symbol string")

    sp = sub.add_parser("fit-indep", help="fit the site-independent model")
    msa_args(sp)
    sp.add_argument("--out", required=True)
    sp.add_argument("--pseudocount", type=float, default=None)
    sp.set_defaults(func=cmd_fit_indep)

    sp = sub.add_parser("fit-potts", help="fit a Potts model by MCMC moment matching")
    msa_args(sp)
    sp.add_argument("--out", required=True)
    sp.add_argument("--history", help="convergence history CSV")
    sp.add_argument("--options", help="YAML mapping of fit options")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--max-rounds", dest="max_rounds", type=int)
    sp.add_argument("--lam", type=float)
    sp.add_argument("--step-size", dest="step_size", type=float)
    sp.add_argument("--n-chains", dest="n_chains", type=int)
    sp.add_argument("--pseudocount", type=float)
    sp.set_defaults(func=cmd_fit_potts)

    sp = sub.add_parser("fit-vae", help="train the sequence VAE")
    msa_args(sp)
    sp.add_argument("--out", required=True)
    sp.add_argument("--history", help="loss history CSV")
    sp.add_argument("--preset", choices=("desk", "full"), default="desk")
    sp.add_argument("--latent-dim", dest="latent_dim", type=int)
    sp.add_argument("--dropout", type=float)
    sp.add_argument("--no-batch-norm", dest="no_batch_norm", action="store_true")
    sp.add_argument("--schedule", choices=("default", "desk"), default="default",
                    help="'desk' trains 128 epochs for small alignments")
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--batch-size", dest="batch_size", type=int)
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_fit_vae)

    sp = sub.add_parser("make-target", help="write a synthetic Potts target model")
    sp.add_argument("--kind", choices=("random", "low-rank"), default="random")
    sp.add_argument("--L", type=int, required=True)
    sp.add_argument("--q", type=int, required=True)
    sp.add_argument("--coupling-scale", dest="coupling_scale", type=float, default=0.5)
    sp.add_argument("--field-scale", dest="field_scale", type=float, default=1.0)
    sp.add_argument("--patterns", type=int, default=8)
    sp.add_argument("--strength", type=float, default=4.0)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_make_target)

    sp = sub.add_parser("sample", help="generate sequences from a model file")
    sp.add_argument("--model", required=True)
    sp.add_argument("--n", type=int, required=True)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True, help=".json container or FASTA path")
    sp.add_argument("--n-chains", dest="n_chains", type=int)
    sp.add_argument("--burn-in", dest="burn_in", type=int)
    sp.add_argument("--thin", type=int)
    sp.set_defaults(func=cmd_sample)

    sp = sub.add_parser("energy", help="statistical energies of sequences")
    sp.add_argument("--model", required=True)
    msa_args(sp)
    sp.add_argument("--estimator", choices=("elbo", "importance"), default="importance")
    sp.add_argument("--samples", type=int, default=1000)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", default="-")
    sp.set_defaults(func=cmd_energy)

    sp = sub.add_parser("marginals", help="export marginal or covariance tables as CSV")
    msa_args(sp)
    sp.add_argument("--kind", choices=("univariate", "bivariate", "covariance"), default="covariance")
    sp.add_argument("--pseudocount", type=float, default=0.0)
    sp.add_argument("--out", default="-")
    sp.set_defaults(func=cmd_marginals)

    sp = sub.add_parser("metric", help="compute one generative-capacity metric")
    sp.add_argument("metric", choices=("covariance", "r20", "hamming", "energy", "extrapolate"))
    sp.add_argument("--target", help="target MSA (energy: CSV from `gpsm energy`)")
    sp.add_argument("--eval", help="evaluation MSA (energy: CSV from `gpsm energy`)")
    sp.add_argument("--alphabet", default="protein")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--sets", type=int, default=3000)
    sp.add_argument("--max-order", dest="max_order", type=int, default=10)
    sp.add_argument("--top-k", dest="top_k", type=int, default=20)
    sp.add_argument("--pair-budget", dest="pair_budget", type=_pair_budget, default=None)
    sp.add_argument("--n0", type=int)
    sp.add_argument("--rho0", type=float)
    sp.add_argument("--rho-target", dest="rho_target", type=float)
    sp.add_argument("--out", default="-")
    sp.set_defaults(func=cmd_metric)

    sp = sub.add_parser("run", help="execute the full pipeline from a config file")
    sp.add_argument("--config", required=True)
    sp.add_argument("--no-report", dest="no_report", action="store_true")
    sp.set_defaults(func=cmd_run)

    sp = sub.add_parser("validate", help="check a pipeline config without running it")
    sp.add_argument("--config", required=True)
    sp.set_defaults(func=cmd_validate)

    sp = sub.add_parser("report", help="aggregate the metric reports of a finished run")
    sp.add_argument("--run-dir", dest="run_dir", required=True)
    sp.add_argument("--format", nargs="+", choices=FORMATS, default=list(FORMATS))
    sp.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, AlignmentError, MissingArtifact, FileNotFoundError,
            metrics.UndefinedCorrelation, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
