"""
Pairwise Potts model: energies, multi-chain Gibbs sampling and inverse-Ising
inference by bivariate marginal matching with a SCAD coupling penalty.

Energies follow ``E(S) = sum_i h[i, s_i] + sum_{i<j} J[ij, s_i, s_j]`` with
``p(S) ~ exp(-E(S))``. Couplings are stored pair-major as ``(L(L-1)/2, q, q)``.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
from scipy import stats

from . import _gibbs
from .msa import Alphabet, Msa, bivariate_marginals, pair_counts, pair_indices

logger = logging.getLogger(__name__)

POTTS_VERSION = "potts-1"


@dataclass(frozen=True, eq=False)
class PottsParams:
    h: np.ndarray  # (L, q)
    J: np.ndarray  # (L(L-1)/2, q, q)
    alphabet: Alphabet
    gauge_tag: str = "none"

    def __post_init__(self):
        L, q = self.h.shape
        if self.J.shape != (L * (L - 1) // 2, q, q):
            raise ValueError(f"coupling shape {self.J.shape} inconsistent with L={L}, q={q}")
        if q != self.alphabet.q:
            raise ValueError("field width does not match alphabet size")

    @property
    def L(self) -> int:
        return self.h.shape[0]

    @property
    def q(self) -> int:
        return self.h.shape[1]

    @classmethod
    def zeros(cls, L: int, alphabet: Alphabet) -> "PottsParams":
        q = alphabet.q
        return cls(np.zeros((L, q)), np.zeros((L * (L - 1) // 2, q, q)), alphabet, "zero-sum")


def _check_codes(data: np.ndarray, L: int, q: int) -> np.ndarray:
    data = np.asarray(data)
    if data.shape[-1] != L:
        raise ValueError(f"sequence length {data.shape[-1]} != L={L}")
    if data.size and (data.min() < 0 or data.max() >= q):
        raise ValueError("residue code out of range")
    return data.astype(np.intp)


def potts_energy(params: PottsParams, seq) -> float:
    seq = _check_codes(seq, params.L, params.q)
    if seq.ndim != 1:
        raise ValueError("expected a single sequence")
    return float(potts_energies(params, seq[None, :])[0])


def potts_energies(params: PottsParams, data, chunk: int = 20000) -> np.ndarray:
    """Energies of every row of an ``(N, L)`` code matrix."""
    data = _check_codes(data, params.L, params.q)
    L = params.L
    iu, ju = pair_indices(L)
    pidx = np.arange(len(iu))
    out = np.empty(data.shape[0])
    for start in range(0, data.shape[0], chunk):
        d = data[start:start + chunk]
        e = params.h[np.arange(L), d].sum(axis=1)
        if len(iu):
            e += params.J[pidx, d[:, iu], d[:, ju]].sum(axis=1)
        out[start:start + chunk] = e
    return out


def zero_sum_gauge(params: PottsParams) -> PottsParams:
    """Move to the zero-sum gauge; energies change by a constant only."""
    L, q = params.L, params.q
    J = params.J
    row = J.mean(axis=2)  # (P, q) function of s_i
    col = J.mean(axis=1)  # (P, q) function of s_j
    grand = J.mean(axis=(1, 2))
    Jz = J - row[:, :, None] - col[:, None, :] + grand[:, None, None]
    h = params.h.copy()
    iu, ju = pair_indices(L)
    np.add.at(h, iu, row - grand[:, None] / 2)
    np.add.at(h, ju, col - grand[:, None] / 2)
    h -= h.mean(axis=1, keepdims=True)
    return PottsParams(h, Jz, params.alphabet, "zero-sum")


def scad_penalty(x, lam: float, a: float = 3.7):
    """SCAD penalty and its derivative.

    Linear ``lam |x|`` up to ``lam``, a quadratic blend up to ``a lam`` and the
    constant ``(a + 1) lam^2 / 2`` beyond, where the derivative vanishes.
    Works elementwise on arrays; returns ``(penalty, gradient)``.
    """
    if lam <= 0:
        raise ValueError("lam must be positive")
    if a <= 2:
        raise ValueError("SCAD shape parameter a must exceed 2")
    x = np.asarray(x, dtype=np.float64)
    ax = np.abs(x)
    small = ax <= lam
    mid = (ax > lam) & (ax <= a * lam)
    pen = np.where(
        small,
        lam * ax,
        np.where(mid, (2 * a * lam * ax - ax ** 2 - lam ** 2) / (2 * (a - 1)), (a + 1) * lam ** 2 / 2),
    )
    grad = np.where(small, lam, np.where(mid, (a * lam - ax) / (a - 1), 0.0)) * np.sign(x)
    if pen.ndim == 0:
        return float(pen), float(grad)
    return pen, grad


def parameter_count(L: int, q: int):
    """Free parameter counts ``(potts, indep)``."""
    if L < 2 or q < 2:
        raise ValueError("need L >= 2 and q >= 2")
    return L * (L - 1) // 2 * (q - 1) ** 2 + L * (q - 1), L * (q - 1)


# --------------------------------------------------------------------------
# sampling


class GibbsChains:
    """A set of persistent single-site Gibbs chains.

    Chains start from independent uniform sequences. All randomness comes from
    one ``numpy`` generator seeded with ``seed`` so runs are reproducible.
    """

    def __init__(self, params: PottsParams, n_chains: int, seed: int):
        if n_chains < 1:
            raise ValueError("n_chains must be >= 1")
        self.rng = np.random.default_rng(seed)
        self.states = self.rng.integers(0, params.q, size=(n_chains, params.L)).astype(np.uint8)
        self.set_params(params)

    def set_params(self, params: PottsParams) -> None:
        self.params = params
        self._h = np.ascontiguousarray(params.h, dtype=np.float64)
        self._W = _gibbs.dense_couplings(params.J, params.L)

    @property
    def n_chains(self) -> int:
        return self.states.shape[0]

    def sweep(self, n_sweeps: int) -> np.ndarray:
        """Advance every chain ``n_sweeps`` sweeps; returns chain-0 energy trace."""
        C, L = self.states.shape
        trace = np.empty(n_sweeps)
        block = max(1, min(n_sweeps, 4_000_000 // (C * L)))
        done = 0
        while done < n_sweeps:
            k = min(block, n_sweeps - done)
            u = self.rng.random((k, C, L))
            _gibbs.gibbs_sweeps(self.states, self._h, self._W, u, trace[done:done + k])
            done += k
        return trace

    def equilibrate(self, burn_in_sweeps: int, max_factor: int = 16, alpha: float = 0.05) -> int:
        """Burn in until chain 0's energy trace shows no drift.

        After each burn-in block the two halves of the accumulated trace are
        compared with Welch's t-test; the burn-in doubles until ``p > alpha`` or
        ``max_factor`` times the initial length is reached. Returns the sweeps run.
        """
        if burn_in_sweeps < 1:
            raise ValueError("burn_in_sweeps must be >= 1")
        trace = self.sweep(burn_in_sweeps)
        total = burn_in_sweeps
        while total < max_factor * burn_in_sweeps:
            half = len(trace) // 2
            if half < 2 or np.ptp(trace) == 0:
                break
            p = stats.ttest_ind(trace[:half], trace[half:], equal_var=False).pvalue
            if not (p <= alpha):
                break
            trace = np.concatenate([trace, self.sweep(total)])
            total *= 2
        else:
            logger.warning("burn-in did not pass the drift test after %d sweeps", total)
        return total

    def collect(self, n_per_chain: int, thin_sweeps: int) -> np.ndarray:
        """Return ``(n_per_chain, n_chains, L)`` states taken every ``thin_sweeps``."""
        out = np.empty((n_per_chain,) + self.states.shape, dtype=np.uint8)
        for k in range(n_per_chain):
            self.sweep(thin_sweeps)
            out[k] = self.states
        return out


def gibbs_sample(
    params: PottsParams,
    n: int,
    n_chains: int = 1000,
    burn_in_sweeps: int = 100,
    thin_sweeps: int = 2,
    seed: int = 0,
) -> Msa:
    """Generate ``n`` sequences with single-site Gibbs sampling.

    Samples are taken round-robin across chains: row ``k`` comes from chain
    ``k % n_chains``.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if thin_sweeps < 1:
        raise ValueError("thin_sweeps must be >= 1")
    n_chains = min(n_chains, n)
    chains = GibbsChains(params, n_chains, seed)
    chains.equilibrate(burn_in_sweeps)
    per_chain = -(-n // n_chains)
    samples = chains.collect(per_chain, thin_sweeps).reshape(-1, params.L)[:n]
    return Msa(samples, params.alphabet, tuple(f"potts_{k}" for k in range(n)))


# --------------------------------------------------------------------------
# inference


@dataclass
class FitConfig:
    """Knobs of the marginal-matching fit.

    ``pseudocount=None`` means ``1/N``. ``convergence_tol=None`` sets the
    tolerance to ``tol_factor`` times the sum of squared residuals expected
    from Monte-Carlo noise alone at the per-round sample size.
    """

    pseudocount: Optional[float] = None
    lam: float = 0.001
    scad_a: float = 3.7
    step_size: float = 0.1
    damping: float = 0.5
    n_chains: int = 1000
    steps_per_round: int = 100
    thin_sweeps: int = 1
    burn_in_sweeps: int = 100
    max_rounds: int = 400
    convergence_tol: Optional[float] = None
    tol_factor: float = 1.5
    min_step: float = 1e-3
    seed: int = 0

    def __post_init__(self):
        positive = ("lam", "step_size", "n_chains", "steps_per_round", "thin_sweeps",
                    "burn_in_sweeps", "max_rounds", "tol_factor", "min_step")
        for name in positive:
            if not getattr(self, name) > 0:
                raise ValueError(f"FitConfig.{name} must be positive")
        if not 0 <= self.damping < 1:
            raise ValueError("FitConfig.damping must lie in [0, 1)")
        if self.scad_a <= 2:
            raise ValueError("FitConfig.scad_a must exceed 2")
        if self.convergence_tol is not None and self.convergence_tol <= 0:
            raise ValueError("FitConfig.convergence_tol must be positive")
        if self.pseudocount is not None and self.pseudocount < 0:
            raise ValueError("FitConfig.pseudocount must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class FitResult:
    params: PottsParams
    converged: bool
    history: list = field(default_factory=list)  # (round, residual, step)

    def history_csv(self) -> str:
        lines = ["round,residual,step"]
        lines += [f"{r},{res:.10g},{g:.10g}" for r, res, g in self.history]
        return "\n".join(lines) + "\n"


def fit_potts(train: Msa, config: Optional[FitConfig] = None) -> FitResult:
    """Fit a Potts model so its bivariate marginals match ``train``.

    Each round the persistent chains are advanced and the model marginals are
    estimated from ``steps_per_round`` collections of every chain. Couplings
    and fields then take a damped step along the relative marginal residual
    (a diagonal Newton scaling), couplings also feel the SCAD penalty
    gradient, and parameters are re-gauged to zero-sum. The step size halves
    whenever the residual grows while still above twice the noise tolerance.
    """
    config = config or FitConfig()
    if train.N < 2 or train.L < 2:
        raise ValueError("fit_potts needs N >= 2 and L >= 2")
    L, q = train.L, train.q
    pc = 1.0 / train.N if config.pseudocount is None else config.pseudocount
    bi = bivariate_marginals(train, pc)
    f2 = bi.freqs
    f1 = bi.univariate().freqs
    iu, ju = pair_indices(L)

    h0 = -np.log(np.clip(f1, 1e-12, None))
    params = zero_sum_gauge(PottsParams(h0, np.zeros((len(iu), q, q)), train.alphabet))
    chains = GibbsChains(params, config.n_chains, config.seed)
    chains.equilibrate(config.burn_in_sweeps)

    M = config.n_chains * config.steps_per_round
    tol = config.convergence_tol
    if tol is None:
        tol = config.tol_factor * float((f2 * (1 - f2)).sum()) / M

    step = config.step_size
    vel_h = np.zeros_like(params.h)
    vel_J = np.zeros_like(params.J)
    best = (math.inf, params)
    prev = math.inf
    history = []
    converged = False
    for rnd in range(config.max_rounds):
        chains.set_params(params)
        samples = chains.collect(config.steps_per_round, config.thin_sweeps).reshape(-1, L)
        m2 = pair_counts(samples, q) / len(samples)
        m1 = np.bincount((samples.astype(np.int64) + q * np.arange(L)).ravel(),
                         minlength=L * q).reshape(L, q) / len(samples)
        r2 = m2 - f2
        ssr = float((r2 ** 2).sum())
        history.append((rnd, ssr, step))
        logger.debug("round %d residual %.4g step %.4g", rnd, ssr, step)
        if ssr < best[0]:
            best = (ssr, params)
        if ssr < tol:
            converged = True
            break
        if ssr > prev and ssr > 2 * tol:
            step = max(step / 2, config.min_step)
        prev = ssr

        # diagonal Newton scaling: d f / d theta ~ f (1 - f)
        gJ = r2 / np.maximum(m2 * (1 - m2), 1e-4)
        _, pen = scad_penalty(params.J, config.lam, config.scad_a)
        gJ -= pen / np.maximum(f2 * (1 - f2), 1e-4)
        gh = (m1 - f1) / np.maximum(m1 * (1 - m1), 1e-4)
        vel_J = config.damping * vel_J + step * gJ
        vel_h = config.damping * vel_h + step * gh
        params = zero_sum_gauge(
            PottsParams(params.h + vel_h / L, params.J + vel_J, train.alphabet)
        )

    if not converged:
        logger.warning("fit_potts did not reach tolerance %.3g in %d rounds", tol, config.max_rounds)
        params = best[1]
    return FitResult(params, converged, history)


# --------------------------------------------------------------------------
# serialization


def potts_to_json(params: PottsParams) -> dict:
    return {
        "version": POTTS_VERSION,
        "L": params.L,
        "q": params.q,
        "alphabet": params.alphabet.to_dict(),
        "gauge": params.gauge_tag,
        "h": params.h.tolist(),
        "J": params.J.tolist(),
    }


def potts_from_json(d: dict) -> PottsParams:
    if d.get("version") != POTTS_VERSION:
        raise ValueError(f"not a {POTTS_VERSION} model file")
    L, q = d["L"], d["q"]
    h = np.asarray(d["h"], dtype=np.float64).reshape(L, q)
    J = np.asarray(d["J"], dtype=np.float64).reshape(L * (L - 1) // 2, q, q)
    alphabet = Alphabet.from_dict(d["alphabet"]) if "alphabet" in d else Alphabet.letters(q)
    return PottsParams(h, J, alphabet, d.get("gauge", "none"))


def save_potts(params: PottsParams, path) -> None:
    with open(path, "w") as fh:
        json.dump(potts_to_json(params), fh)


def random_potts(L: int, q: int, coupling_scale: float = 0.5, field_scale: float = 1.0,
                 seed: int = 0, alphabet: Optional[Alphabet] = None) -> PottsParams:
    """Random model with ``J ~ U(-coupling_scale, coupling_scale)`` and normal fields."""
    rng = np.random.default_rng(seed)
    alphabet = alphabet or Alphabet.letters(q)
    h = rng.normal(0.0, field_scale, size=(L, q))
    J = rng.uniform(-coupling_scale, coupling_scale, size=(L * (L - 1) // 2, q, q))
    return PottsParams(h, J, alphabet, "none")


def low_rank_potts(L: int, q: int, n_patterns: int = 8, strength: float = 4.0,
                   field_scale: float = 0.5, seed: int = 0,
                   alphabet: Optional[Alphabet] = None) -> PottsParams:
    """Potts model whose couplings are a sum of ``n_patterns`` equal-strength modes.

    ``J^{ij}_{ab} = -(strength / L) sum_k xi^k_{ia} xi^k_{jb}`` with orthogonal,
    per-site centered patterns of squared norm ``L``. Such a model has
    ``n_patterns`` collective degrees of freedom, giving a structured target
    with a known latent dimension.
    """
    if n_patterns < 1 or n_patterns > L * (q - 1):
        raise ValueError("n_patterns must lie in [1, L*(q-1)]")
    rng = np.random.default_rng(seed)
    alphabet = alphabet or Alphabet.letters(q)
    xi = rng.normal(size=(n_patterns, L, q))
    xi -= xi.mean(axis=2, keepdims=True)
    basis, _ = np.linalg.qr(xi.reshape(n_patterns, -1).T)
    xi = (basis.T * np.sqrt(L)).reshape(n_patterns, L, q)
    iu, ju = pair_indices(L)
    J = -(strength / L) * np.einsum("kpa,kpb->pab", xi[:, iu], xi[:, ju])
    h = rng.normal(0.0, field_scale, size=(L, q))
    return PottsParams(h, J, alphabet, "none")
