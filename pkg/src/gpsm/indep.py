"""Site-independent model: analytic fit, exact sampling and exact energies."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .msa import Alphabet, Msa, univariate_marginals

INDEP_VERSION = "indep-1"


@dataclass(frozen=True, eq=False)
class IndepParams:
    """Fields ``h`` (L x q) in the normalized convention, ``sum_a exp(-h[i, a]) = 1``."""

    h: np.ndarray
    alphabet: Alphabet
    pseudocount: float = 0.0

    @property
    def L(self) -> int:
        return self.h.shape[0]

    @property
    def q(self) -> int:
        return self.h.shape[1]

    @property
    def probs(self) -> np.ndarray:
        return np.exp(-self.h)


def fit_indep(msa: Msa, pseudocount: float | None = None) -> IndepParams:
    """Maximum-likelihood fields ``h = -log f`` from smoothed marginals.

    ``pseudocount`` defaults to ``1/N``.
    """
    if pseudocount is None:
        pseudocount = 1.0 / msa.N
    f = univariate_marginals(msa, pseudocount).freqs
    if (f <= 0).any():
        raise ValueError(
            "unobserved residues give infinite fields; use a positive pseudocount"
        )
    # renormalize rows so exp(-h) sums to one to machine precision
    f = f / f.sum(axis=1, keepdims=True)
    return IndepParams(-np.log(f), msa.alphabet, float(pseudocount))


def sample_indep(params: IndepParams, n: int, seed: int) -> Msa:
    """Draw ``n`` sequences column by column (inverse-CDF sampling)."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    cdf = np.cumsum(params.probs, axis=1)
    cdf[:, -1] = 1.0
    u = rng.random((n, params.L))
    data = np.empty((n, params.L), dtype=np.uint8)
    for i in range(params.L):
        data[:, i] = np.searchsorted(cdf[i], u[:, i], side="right")
    return Msa(data, params.alphabet, tuple(f"indep_{k}" for k in range(n)))


def energy_indep(params: IndepParams, seq) -> float:
    """``E(S) = sum_i h[i, s_i]``; equals ``-log p(S)``."""
    seq = np.asarray(seq)
    if seq.shape != (params.L,):
        raise ValueError(f"sequence length {seq.shape} != L={params.L}")
    if seq.min() < 0 or seq.max() >= params.q:
        raise ValueError("residue code out of range")
    return float(params.h[np.arange(params.L), seq].sum())


def energies_indep(params: IndepParams, data: np.ndarray) -> np.ndarray:
    data = np.asarray(data, dtype=np.intp)
    if data.ndim != 2 or data.shape[1] != params.L:
        raise ValueError("expected an (N, L) code matrix")
    if data.min() < 0 or data.max() >= params.q:
        raise ValueError("residue code out of range")
    return params.h[np.arange(params.L), data].sum(axis=1)


def indep_to_json(params: IndepParams) -> dict:
    return {
        "version": INDEP_VERSION,
        "L": params.L,
        "q": params.q,
        "alphabet": params.alphabet.to_dict(),
        "pseudocount": params.pseudocount,
        "h": params.h.tolist(),
    }


def indep_from_json(d: dict) -> IndepParams:
    if d.get("version") != INDEP_VERSION:
        raise ValueError(f"not an {INDEP_VERSION} model file")
    h = np.asarray(d["h"], dtype=np.float64)
    if h.shape != (d["L"], d["q"]):
        raise ValueError("field matrix shape does not match L, q")
    alphabet = Alphabet.from_dict(d["alphabet"]) if "alphabet" in d else Alphabet.letters(d["q"])
    return IndepParams(h, alphabet, d.get("pseudocount", 0.0))


def save_indep(params: IndepParams, path) -> None:
    with open(path, "w") as fh:
        json.dump(indep_to_json(params), fh)
