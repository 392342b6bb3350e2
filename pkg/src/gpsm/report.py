"""Aggregate the per-(model, metric) reports of a pipeline run."""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from .metrics import rescale_loglog
from .msa import DistanceHistogram

FORMATS = ("json", "csv", "svg")


class MissingArtifact(FileNotFoundError):
    pass


def _load_manifest(run_dir: Path) -> dict:
    path = run_dir / "manifest.json"
    if not path.exists():
        raise MissingArtifact(f"no manifest.json under {run_dir}")
    with open(path) as fh:
        return json.load(fh)


def collect_reports(run_dir) -> dict:
    """``{model: {metric: report}}`` from every report listed in the manifest."""
    run_dir = Path(run_dir)
    manifest = _load_manifest(run_dir)
    missing = [r["path"] for r in manifest["reports"] if not (run_dir / r["path"]).exists()]
    if missing:
        raise MissingArtifact("missing metric reports: " + ", ".join(missing))
    out: dict = {}
    for r in manifest["reports"]:
        with open(run_dir / r["path"]) as fh:
            out.setdefault(r["model"], {})[r["metric"]] = json.load(fh)
    return out


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _r20_rows(reports):
    for model, by_metric in reports.items():
        rep = by_metric.get("r20")
        if rep is None:
            continue
        for o in rep["result"]["orders"]:
            yield [model, o["order"], o["score"], o["sets_used"], o["sets_skipped"]]


def _rescaled(counts):
    hist = DistanceHistogram(np.asarray(counts, dtype=np.int64))
    return rescale_loglog(hist)


def _energy_table(run_dir: Path, model: str):
    path = run_dir / "stage5" / f"{model}__energies.csv"
    if not path.exists():
        raise MissingArtifact(f"missing energy table {path}")
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return data[:, 0], data[:, 1]


def _svg_figures(run_dir: Path, reports: dict, dest: Path) -> list:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams["svg.hashsalt"] = "gpsm"
    meta = {"Date": None}
    written = []

    r20_models = [m for m in reports if "r20" in reports[m]]
    if r20_models:
        fig, ax = plt.subplots(figsize=(5, 4))
        for m in r20_models:
            orders = reports[m]["r20"]["result"]["orders"]
            x = [o["order"] for o in orders]
            y = [np.nan if o["score"] is None else o["score"] for o in orders]
            ax.plot(x, y, "--" if m == "ceiling" else "-", marker="o", label=m)
        ax.set_xlabel("order n")
        ax.set_ylabel("r20")
        ax.legend()
        fig.tight_layout()
        fig.savefig(dest / "r20.svg", metadata=meta)
        plt.close(fig)
        written.append(dest / "r20.svg")

    ham_models = [m for m in reports if "hamming" in reports[m]]
    if ham_models:
        fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 4))
        first = reports[ham_models[0]]["hamming"]["result"]["target_counts"]
        t = np.asarray(first, dtype=float)
        ax1.plot(np.arange(len(t)), t / t.sum(), "k-", label="target")
        rt = _rescaled(first)
        if not rt.degenerate:
            ax2.loglog(*rt.log_domain(), "k-", label="target")
        for m in ham_models:
            c = np.asarray(reports[m]["hamming"]["result"]["eval_counts"], dtype=float)
            ax1.plot(np.arange(len(c)), c / c.sum(), label=m)
            rs = _rescaled(c.astype(np.int64))
            if not rs.degenerate:
                ax2.loglog(*rs.log_domain(), label=m)
        ax1.set_xlabel("Hamming distance")
        ax1.set_ylabel("frequency")
        ax2.set_xlabel("d / mode")
        ax2.set_ylabel("f / f(mode)")
        ax1.legend()
        fig.tight_layout()
        fig.savefig(dest / "hamming.svg", metadata=meta)
        plt.close(fig)
        written.append(dest / "hamming.svg")

    en_models = [m for m in reports if "energy" in reports[m]]
    if en_models:
        fig, axes = plt.subplots(1, len(en_models), figsize=(3.5 * len(en_models), 3.5), squeeze=False)
        for ax, m in zip(axes[0], en_models):
            et, em = _energy_table(run_dir, m)
            ax.scatter(et, em, s=3)
            ax.set_title(f"{m}  rho={reports[m]['energy']['result']['rho']:.3f}")
            ax.set_xlabel("target energy")
            ax.set_ylabel("model energy")
        fig.tight_layout()
        fig.savefig(dest / "energy.svg", metadata=meta)
        plt.close(fig)
        written.append(dest / "energy.svg")
    return written


def emit_report(run_dir, formats=FORMATS) -> list:
    """Write the aggregate report files under ``<run_dir>/report``.

    Returns the written paths. Raises :class:`MissingArtifact` naming every
    report file referenced by the manifest but absent on disk.
    """
    run_dir = Path(run_dir)
    formats = [formats] if isinstance(formats, str) else list(formats)
    bad = set(formats) - set(FORMATS)
    if bad:
        raise ValueError(f"unknown report formats {sorted(bad)}")
    reports = collect_reports(run_dir)
    dest = run_dir / "report"
    dest.mkdir(exist_ok=True)
    written = []

    if "json" in formats:
        summary = {
            model: {metric: rep["result"] for metric, rep in by_metric.items()}
            for model, by_metric in reports.items()
        }
        path = dest / "report.json"
        with open(path, "w") as fh:
            json.dump(summary, fh, indent=2, sort_keys=True)
            fh.write("\n")
        written.append(path)

    if "csv" in formats:
        path = dest / "r20.csv"
        _write_csv(path, ["model", "order", "r20", "sets_used", "sets_skipped"], _r20_rows(reports))
        written.append(path)

        rows = []
        for m, by_metric in reports.items():
            rep = by_metric.get("hamming")
            if rep is None:
                continue
            rs = _rescaled(rep["result"]["eval_counts"])
            rows += [[m, f"{d:.10g}", f"{f:.10g}", rs.mode] for d, f in zip(rs.distance, rs.frequency)]
        path = dest / "hamming_rescaled.csv"
        _write_csv(path, ["model", "distance_over_mode", "frequency_over_peak", "mode"], rows)
        written.append(path)

        rows = []
        for m, by_metric in reports.items():
            for metric in ("covariance", "energy", "hamming"):
                rep = by_metric.get(metric)
                if rep is not None:
                    key = "tvd" if metric == "hamming" else "rho"
                    rows.append([m, metric, key, rep["result"][key]])
        path = dest / "summary.csv"
        _write_csv(path, ["model", "metric", "statistic", "value"], rows)
        written.append(path)

    if "svg" in formats:
        written += _svg_figures(run_dir, reports, dest)
    return written
