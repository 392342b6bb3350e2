"""
Generative-capacity metrics: pairwise covariance correlation, the top-k
higher-order marginal correlation ``r20``, Hamming-distance TVD with
peak-rescaled tables, statistical-energy correlation and the finite-sample
extrapolation law for ``r20``.
"""

from __future__ import annotations

import datetime as _dt
import hashlib
import itertools
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .msa import CovarianceTable, DistanceHistogram, Msa


class UndefinedCorrelation(ValueError):
    """Pearson correlation requested for a zero-variance vector."""


def pearson(x, y) -> float:
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.shape != y.shape:
        raise ValueError(f"length mismatch {x.shape} vs {y.shape}")
    dx = x - x.mean()
    dy = y - y.mean()
    sxx = float(dx @ dx)
    syy = float(dy @ dy)
    if sxx == 0 or syy == 0:
        raise UndefinedCorrelation("correlation undefined: a vector has zero variance")
    r = float(dx @ dy) / math.sqrt(sxx * syy)
    return max(-1.0, min(1.0, r))


def covariance_correlation(cov_a: CovarianceTable, cov_b: CovarianceTable) -> float:
    """Pearson correlation over every pair/residue covariance entry."""
    if cov_a.values.shape != cov_b.values.shape:
        raise ValueError(f"covariance tables differ in shape: {cov_a.values.shape} vs {cov_b.values.shape}")
    return pearson(cov_a.values, cov_b.values)


def energy_correlation(e_target, e_model) -> float:
    e_target = np.asarray(e_target, dtype=np.float64)
    e_model = np.asarray(e_model, dtype=np.float64)
    if e_target.shape != e_model.shape:
        raise ValueError("energy vectors differ in length")
    if e_target.size < 3:
        raise ValueError("need at least 3 paired energies")
    return pearson(e_target, e_model)


# --------------------------------------------------------------------------
# r20


@dataclass
class OrderScore:
    order: int
    score: float
    sets_requested: int
    sets_used: int
    sets_skipped: int


@dataclass
class R20Report:
    orders: list  # list[OrderScore]
    seed: int
    top_k: int
    sets_per_order: int
    target_n: int
    eval_n: int

    def scores(self) -> dict:
        return {o.order: o.score for o in self.orders}

    def to_dict(self) -> dict:
        return asdict(self)


def _position_sets(L: int, n: int, count: int, rng: np.random.Generator) -> list:
    """Distinct sorted position sets; every subset when ``C(L, n) <= count``."""
    if math.comb(L, n) <= count:
        return [tuple(c) for c in itertools.combinations(range(L), n)]
    seen, out = set(), []
    while len(out) < count:
        s = tuple(sorted(rng.choice(L, size=n, replace=False).tolist()))
        if s not in seen:
            seen.add(s)
            out.append(s)
    return out


def _subsequence_keys(data: np.ndarray, positions, q: int) -> np.ndarray:
    """Base-``q`` integer key per row, first position most significant."""
    key = np.zeros(data.shape[0], dtype=np.int64)
    for p in positions:
        key *= q
        key += data[:, p]
    return key


def _top_k_frequencies(target_keys, eval_keys, top_k, space):
    if space <= 1 << 20:
        tc = np.bincount(target_keys, minlength=space)
        codes = np.flatnonzero(tc)
        counts = tc[codes]
    else:
        codes, counts = np.unique(target_keys, return_counts=True)
    if len(codes) < 2:
        return None
    # descending frequency, ties broken by ascending (lexicographic) code
    order = np.lexsort((codes, -counts))[:top_k]
    top = codes[order]
    f_t = counts[order] / len(target_keys)
    if space <= 1 << 20:
        ec = np.bincount(eval_keys, minlength=space)
        f_e = ec[top] / len(eval_keys)
    else:
        srt = np.sort(eval_keys)
        f_e = (np.searchsorted(srt, top, side="right") - np.searchsorted(srt, top, side="left")) / len(eval_keys)
    return f_t, f_e


def r20(
    target: Msa,
    evaluation: Msa,
    max_order: int = 10,
    sets_per_order: int = 3000,
    top_k: int = 20,
    seed: int = 0,
    min_order: int = 2,
) -> R20Report:
    """Mean Pearson correlation of top-``k`` subsequence frequencies.

    For each order ``n`` a set of position tuples is drawn; per tuple the
    ``top_k`` most frequent target subsequences are compared with their
    frequencies in ``evaluation``. Tuples with fewer than two distinct target
    subsequences or a zero-variance frequency vector are skipped.
    """
    if target.L != evaluation.L or target.q != evaluation.q:
        raise ValueError("target and evaluation alignments differ in (L, q)")
    L, q = target.L, target.q
    if max_order > L:
        raise ValueError(f"max_order {max_order} exceeds L={L}")
    if min_order < 2 or min_order > max_order:
        raise ValueError("need 2 <= min_order <= max_order")
    if top_k < 2:
        raise ValueError("top_k must be at least 2")
    if q ** max_order >= 2 ** 62:
        raise ValueError("subsequence keys would overflow int64")
    rng = np.random.default_rng(seed)
    orders = []
    for n in range(min_order, max_order + 1):
        sets = _position_sets(L, n, sets_per_order, rng)
        vals = []
        skipped = 0
        for pos in sets:
            got = _top_k_frequencies(
                _subsequence_keys(target.data, pos, q),
                _subsequence_keys(evaluation.data, pos, q),
                top_k,
                q ** n,
            )
            if got is None or np.ptp(got[0]) == 0 or np.ptp(got[1]) == 0:
                skipped += 1
                continue
            vals.append(pearson(*got))
        score = float(np.mean(vals)) if vals else float("nan")
        orders.append(OrderScore(n, score, len(sets), len(vals), skipped))
    return R20Report(orders, seed, top_k, sets_per_order, target.N, evaluation.N)


# --------------------------------------------------------------------------
# Hamming distributions


def hamming_tvd(hist_a: DistanceHistogram, hist_b: DistanceHistogram) -> float:
    """Total variation distance ``0.5 * sum_d |f_a(d) - f_b(d)|``."""
    if hist_a.L != hist_b.L:
        raise ValueError(f"histograms cover different lengths: {hist_a.L} vs {hist_b.L}")
    return 0.5 * float(np.abs(hist_a.normalized - hist_b.normalized).sum())


@dataclass
class RescaledHistogram:
    """Distances over the mode and frequencies over the peak."""

    distance: np.ndarray
    frequency: np.ndarray
    mode: int
    degenerate: bool = False

    def log_domain(self):
        """Rows usable on log-log axes (positive distance and frequency)."""
        keep = (self.frequency > 0) & (self.distance > 0)
        return self.distance[keep], self.frequency[keep]


def rescale_loglog(hist: DistanceHistogram) -> RescaledHistogram:
    """Re-center on the mode and rescale by the peak frequency.

    The mode is the smallest distance reaching the maximum. If all mass sits
    at ``d = 0`` the raw table is returned with ``degenerate=True``.
    """
    f = hist.normalized
    if not np.isfinite(f).all():
        raise ValueError("empty histogram")
    d = np.arange(len(f), dtype=np.float64)
    mode = int(np.argmax(f))
    if mode == 0:
        return RescaledHistogram(d, f.copy(), 0, True)
    keep = f > 0
    if keep.sum() == 1:
        return RescaledHistogram(np.array([1.0]), np.array([1.0]), mode)
    return RescaledHistogram(d / mode, f / f[mode], mode)


# --------------------------------------------------------------------------
# estimation-error extrapolation


def extrapolate_msa_size(n0: int, rho0: float, rho_target: float) -> int:
    """MSA size at which ``r20`` reaches ``rho_target`` given ``rho0`` at ``n0``.

    Uses the invariance of ``N (1/rho^2 - 1)``; rounded up.
    """
    if rho_target >= 1:
        raise ValueError("rho_target >= 1 requires an infinite alignment")
    if not (0 < rho0 < 1 and 0 < rho_target):
        raise ValueError("correlations must lie in (0, 1)")
    if rho_target == rho0:
        return int(n0)
    odds_t = rho_target ** 2 / (1 - rho_target ** 2)
    odds_0 = rho0 ** 2 / (1 - rho0 ** 2)
    return int(math.ceil(n0 * odds_t / odds_0))


# --------------------------------------------------------------------------
# reports


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _jsonable(x):
    if isinstance(x, dict):
        return {k: _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    if isinstance(x, (np.floating, float)):
        x = float(x)
        return x if math.isfinite(x) else None
    if isinstance(x, np.integer):
        return int(x)
    return x


@dataclass
class MetricReport:
    """One metric evaluation with the fingerprints needed to reproduce it."""

    metric: str
    result: object
    inputs: dict = field(default_factory=dict)
    seed: Optional[int] = None
    params: dict = field(default_factory=dict)
    model: Optional[str] = None
    timestamp: Optional[str] = None

    def stamp(self) -> "MetricReport":
        self.timestamp = _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")
        return self

    def to_dict(self) -> dict:
        return _jsonable(asdict(self))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)
