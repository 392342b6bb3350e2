"""
Alignment representation, FASTA/JSON I/O, identity filtering, splitting and
the frequency / covariance counting shared by the models and the metrics.

Residues are stored as small integer codes in an ``(N, L)`` ``uint8`` matrix.
Pair quantities are stored pair-major over the ``L(L-1)/2`` position pairs
``i < j`` in ``np.triu_indices`` order.
"""

from __future__ import annotations

import hashlib
import io
import json
import logging
import warnings
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numba
import numpy as np

logger = logging.getLogger(__name__)

MSA_VERSION = "msa-1"

PROTEIN_SYMBOLS = "ACDEFGHIKLMNPQRSTVWY"


class AlignmentError(ValueError):
    """Raised for malformed or inconsistent alignment input."""


@dataclass(frozen=True)
class Alphabet:
    """Ordered residue alphabet.

    If ``gap_symbol`` is given and absent from ``symbols`` it is appended, so
    the gap occupies the last code. Characters outside the alphabet map to the
    gap code when a gap exists and are rejected otherwise.
    """

    symbols: str
    gap_symbol: Optional[str] = None

    def __post_init__(self):
        syms = self.symbols
        if self.gap_symbol is not None:
            if len(self.gap_symbol) != 1:
                raise ValueError("gap_symbol must be a single character")
            if self.gap_symbol not in syms:
                syms = syms + self.gap_symbol
        if len(set(syms)) != len(syms):
            raise ValueError(f"alphabet symbols are not unique: {syms!r}")
        if len(syms) < 2:
            raise ValueError("alphabet needs at least 2 symbols")
        if len(syms) > 255:
            raise ValueError("alphabet too large for uint8 codes")
        object.__setattr__(self, "symbols", syms)

    @property
    def q(self) -> int:
        return len(self.symbols)

    @property
    def gap_code(self) -> Optional[int]:
        if self.gap_symbol is None:
            return None
        return self.symbols.index(self.gap_symbol)

    @classmethod
    def protein(cls) -> "Alphabet":
        return cls(PROTEIN_SYMBOLS, gap_symbol="-")

    @classmethod
    def letters(cls, q: int) -> "Alphabet":
        """First ``q`` capital letters, no gap (for synthetic data)."""
        if not 2 <= q <= 26:
            raise ValueError("letters() supports 2 <= q <= 26")
        return cls("ABCDEFGHIJKLMNOPQRSTUVWXYZ"[:q])

    def _lookup(self) -> np.ndarray:
        fill = 255 if self.gap_code is None else self.gap_code
        table = np.full(256, fill, dtype=np.uint8)
        for code, ch in enumerate(self.symbols):
            table[ord(ch)] = code
        return table

    def encode(self, seq: str, name: str = "?") -> np.ndarray:
        try:
            raw = np.frombuffer(seq.encode("ascii"), dtype=np.uint8)
        except UnicodeEncodeError:
            raise AlignmentError(f"record {name!r} contains non-ASCII characters")
        codes = self._lookup()[raw]
        if self.gap_code is None and (codes == 255).any():
            bad = sorted({seq[k] for k in np.flatnonzero(codes == 255)})
            raise AlignmentError(
                f"record {name!r} has characters {bad} outside alphabet {self.symbols!r}"
            )
        return codes

    def decode(self, codes: Iterable[int]) -> str:
        return "".join(self.symbols[c] for c in codes)

    def to_dict(self) -> dict:
        return {"symbols": self.symbols, "gap_symbol": self.gap_symbol}

    @classmethod
    def from_dict(cls, d: dict) -> "Alphabet":
        return cls(d["symbols"], d.get("gap_symbol"))


@dataclass(frozen=True, eq=False)
class Msa:
    """An ``N x L`` matrix of residue codes with row identifiers."""

    data: np.ndarray
    alphabet: Alphabet
    ids: tuple = ()

    def __post_init__(self):
        data = np.ascontiguousarray(self.data, dtype=np.uint8)
        if data.ndim != 2:
            raise AlignmentError("alignment data must be a 2-d matrix")
        if data.shape[0] < 1 or data.shape[1] < 1:
            raise AlignmentError(f"empty alignment of shape {data.shape}")
        if data.size and int(data.max()) >= self.alphabet.q:
            raise AlignmentError("residue code out of range for alphabet")
        ids = tuple(self.ids) if len(self.ids) else tuple(f"seq{k}" for k in range(data.shape[0]))
        if len(ids) != data.shape[0]:
            raise AlignmentError(f"{len(ids)} ids for {data.shape[0]} rows")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "ids", ids)

    @property
    def N(self) -> int:
        return self.data.shape[0]

    @property
    def L(self) -> int:
        return self.data.shape[1]

    @property
    def q(self) -> int:
        return self.alphabet.q

    def __len__(self) -> int:
        return self.N

    def subset(self, rows: Sequence[int]) -> "Msa":
        rows = np.asarray(rows, dtype=np.intp)
        return Msa(self.data[rows], self.alphabet, tuple(self.ids[r] for r in rows))

    def sequences(self) -> list:
        return [self.alphabet.decode(row) for row in self.data]

    def fingerprint(self) -> str:
        """sha256 over shape, alphabet and residue codes (ids excluded)."""
        h = hashlib.sha256()
        h.update(f"{self.N}x{self.L}:{self.alphabet.symbols}:".encode())
        h.update(self.data.tobytes())
        return h.hexdigest()

    def row_hashes(self) -> list:
        return [hashlib.sha1(row.tobytes()).hexdigest() for row in self.data]


def parse_fasta(text, alphabet: Alphabet) -> Msa:
    """Parse FASTA text (a string or a text stream) into an :class:`Msa`."""
    if not isinstance(text, str):
        text = text.read()
    names, chunks = [], []
    for line in text.splitlines():
        line = line.strip()
        if not line:
            continue
        if line.startswith(">"):
            names.append(line[1:].strip())
            chunks.append([])
        elif not names:
            raise AlignmentError("sequence data before the first '>' header")
        else:
            chunks[-1].append(line)
    if not names:
        raise AlignmentError("no FASTA records found")
    seqs = ["".join(c) for c in chunks]
    L = len(seqs[0])
    for name, s in zip(names, seqs):
        if len(s) != L:
            raise AlignmentError(
                f"record {name!r} has length {len(s)}, expected {L} (ragged alignment)"
            )
    if L == 0:
        raise AlignmentError("sequences are empty")
    data = np.empty((len(seqs), L), dtype=np.uint8)
    for k, (name, s) in enumerate(zip(names, seqs)):
        data[k] = alphabet.encode(s, name)
    return Msa(data, alphabet, tuple(names))


def read_fasta(path, alphabet: Alphabet) -> Msa:
    with open(path) as fh:
        return parse_fasta(fh.read(), alphabet)


def format_fasta(msa: Msa) -> str:
    out = io.StringIO()
    for name, seq in zip(msa.ids, msa.sequences()):
        out.write(f">{name}\n{seq}\n")
    return out.getvalue()


def write_fasta(msa: Msa, path) -> None:
    with open(path, "w") as fh:
        fh.write(format_fasta(msa))


def msa_to_json(msa: Msa) -> dict:
    return {
        "version": MSA_VERSION,
        "alphabet": msa.alphabet.to_dict(),
        "ids": list(msa.ids),
        "rows": msa.sequences(),
    }


def msa_from_json(d: dict) -> Msa:
    if d.get("version") != MSA_VERSION:
        raise AlignmentError(f"unsupported MSA container version {d.get('version')!r}")
    alphabet = Alphabet.from_dict(d["alphabet"])
    rows = d["rows"]
    if not rows:
        raise AlignmentError("MSA container has no rows")
    L = len(rows[0])
    if any(len(r) != L for r in rows):
        raise AlignmentError("MSA container rows have unequal lengths")
    data = np.stack([alphabet.encode(r) for r in rows])
    return Msa(data, alphabet, tuple(d["ids"]))


def save_msa(msa: Msa, path) -> None:
    """Write ``.json`` containers or FASTA, chosen by file suffix."""
    path = str(path)
    if path.endswith(".json"):
        with open(path, "w") as fh:
            json.dump(msa_to_json(msa), fh)
    else:
        write_fasta(msa, path)


def load_msa(path, alphabet: Optional[Alphabet] = None) -> Msa:
    path = str(path)
    if path.endswith(".json"):
        with open(path) as fh:
            return msa_from_json(json.load(fh))
    if alphabet is None:
        raise AlignmentError("an alphabet is required to read FASTA")
    return read_fasta(path, alphabet)


# --------------------------------------------------------------------------
# filtering and splitting


def filter_by_identity(msa: Msa, cutoff: float, seed: int) -> Msa:
    """Greedy identity filter in a seeded random order.

    A candidate is kept only if its fractional identity to every sequence
    kept so far is at most ``cutoff``. Gap-gap matches count as identical.
    """
    if not 0 < cutoff < 1:
        raise ValueError("cutoff must lie in (0, 1)")
    order = np.random.default_rng(seed).permutation(msa.N)
    kept = _greedy_identity(msa.data, order, cutoff)
    return msa.subset(kept)


@numba.njit(cache=True)
def _greedy_identity(data, order, cutoff):
    N, L = data.shape
    kept = np.empty(N, dtype=np.int64)
    nkept = 0
    limit = cutoff * L
    for idx in order:
        row = data[idx]
        ok = True
        for k in range(nkept):
            other = data[kept[k]]
            same = 0
            for p in range(L):
                if row[p] == other[p]:
                    same += 1
            if same > limit:
                ok = False
                break
        if ok:
            kept[nkept] = idx
            nkept += 1
    return kept[:nkept]


def split_disjoint(msa: Msa, sizes: Sequence[int], seed: int) -> list:
    """Partition a seeded row permutation into consecutive blocks of ``sizes``."""
    sizes = [int(s) for s in sizes]
    if any(s < 1 for s in sizes):
        raise ValueError("split sizes must be positive")
    total = sum(sizes)
    if total > msa.N:
        raise AlignmentError(
            f"split sizes sum to {total} but only {msa.N} sequences are available "
            f"(deficit {total - msa.N})"
        )
    perm = np.random.default_rng(seed).permutation(msa.N)
    out, start = [], 0
    for s in sizes:
        out.append(msa.subset(perm[start:start + s]))
        start += s
    return out


# --------------------------------------------------------------------------
# marginals


def pair_indices(L: int):
    """Row and column positions of the ``L(L-1)/2`` pairs ``i < j``."""
    return np.triu_indices(L, 1)


def pair_index(i: int, j: int, L: int) -> int:
    """Index of pair ``(i, j)``, ``i < j``, in pair-major storage."""
    if not 0 <= i < j < L:
        raise IndexError(f"invalid pair ({i}, {j}) for L={L}")
    return i * L - i * (i + 1) // 2 + (j - i - 1)


@dataclass(frozen=True, eq=False)
class UnivariateMarginals:
    freqs: np.ndarray  # (L, q)
    pseudocount: float = 0.0
    source_n: int = 0

    @property
    def L(self) -> int:
        return self.freqs.shape[0]

    @property
    def q(self) -> int:
        return self.freqs.shape[1]


@dataclass(frozen=True, eq=False)
class BivariateMarginals:
    freqs: np.ndarray  # (L(L-1)/2, q, q)
    L: int
    pseudocount: float = 0.0
    source_n: int = 0

    @property
    def q(self) -> int:
        return self.freqs.shape[1]

    def pair(self, i: int, j: int) -> np.ndarray:
        return self.freqs[pair_index(i, j, self.L)]

    def univariate(self) -> UnivariateMarginals:
        """Single-site tables obtained by marginalizing the pair tables."""
        return UnivariateMarginals(
            univariate_from_pairs(self.freqs, self.L), self.pseudocount, self.source_n
        )


@dataclass(frozen=True, eq=False)
class CovarianceTable:
    values: np.ndarray  # (L(L-1)/2, q, q)
    L: int

    @property
    def q(self) -> int:
        return self.values.shape[1]

    def pair(self, i: int, j: int) -> np.ndarray:
        return self.values[pair_index(i, j, self.L)]


def univariate_counts(data: np.ndarray, q: int) -> np.ndarray:
    N, L = data.shape
    offs = data.astype(np.int64) + q * np.arange(L)
    return np.bincount(offs.ravel(), minlength=L * q).reshape(L, q).astype(np.float64)


def pair_counts(data: np.ndarray, q: int) -> np.ndarray:
    """Pair-major ``(npairs, q, q)`` co-occurrence counts."""
    N, L = data.shape
    if L * q <= 4096:
        onehot = np.zeros((N, L * q), dtype=np.float64)
        onehot[np.arange(N)[:, None], data.astype(np.int64) + q * np.arange(L)] = 1.0
        full = (onehot.T @ onehot).reshape(L, q, L, q)
        iu, ju = pair_indices(L)
        return np.ascontiguousarray(full[iu, :, ju, :])
    return _pair_counts_loop(data, q)


@numba.njit(cache=True)
def _pair_counts_loop(data, q):
    N, L = data.shape
    npairs = L * (L - 1) // 2
    out = np.zeros((npairs, q, q), dtype=np.float64)
    for n in range(N):
        p = 0
        for i in range(L):
            a = data[n, i]
            for j in range(i + 1, L):
                out[p, a, data[n, j]] += 1.0
                p += 1
    return out


def univariate_from_pairs(freqs: np.ndarray, L: int) -> np.ndarray:
    q = freqs.shape[1]
    out = np.empty((L, q))
    if L < 2:
        raise ValueError("need L >= 2")
    out[:L - 1] = freqs[[pair_index(i, i + 1, L) for i in range(L - 1)]].sum(axis=2)
    out[L - 1] = freqs[pair_index(L - 2, L - 1, L)].sum(axis=0)
    return out


def univariate_marginals(msa: Msa, pseudocount: float = 0.0) -> UnivariateMarginals:
    """Smoothed single-site frequencies ``(count/N + pc) / (1 + q pc)``."""
    if pseudocount < 0:
        raise ValueError("pseudocount must be non-negative")
    f = univariate_counts(msa.data, msa.q) / msa.N
    f = (f + pseudocount) / (1.0 + msa.q * pseudocount)
    return UnivariateMarginals(f, float(pseudocount), msa.N)


def bivariate_marginals(msa: Msa, pseudocount: float = 0.0) -> BivariateMarginals:
    """Smoothed pair frequencies ``(count/N + pc) / (1 + q^2 pc)``."""
    if pseudocount < 0:
        raise ValueError("pseudocount must be non-negative")
    if msa.L < 2:
        raise AlignmentError("bivariate marginals need at least 2 positions")
    f = pair_counts(msa.data, msa.q) / msa.N
    f = (f + pseudocount) / (1.0 + msa.q ** 2 * pseudocount)
    return BivariateMarginals(f, msa.L, float(pseudocount), msa.N)


def covariances(uni: UnivariateMarginals, bi: BivariateMarginals) -> CovarianceTable:
    """``C^{ij}_{ab} = f^{ij}_{ab} - f^i_a f^j_b``.

    The single-site factors come from marginalizing ``bi`` so every pair
    block has exactly zero row and column sums. ``uni`` is checked for shape
    and, at zero pseudocount, for agreement with ``bi``.
    """
    if uni.freqs.shape != (bi.L, bi.q):
        raise ValueError(
            f"univariate table {uni.freqs.shape} does not match bivariate (L={bi.L}, q={bi.q})"
        )
    fi = bi.univariate().freqs
    if uni.pseudocount == 0 and bi.pseudocount == 0 and not np.allclose(fi, uni.freqs, atol=1e-9):
        raise ValueError("univariate and bivariate marginals come from different alignments")
    iu, ju = pair_indices(bi.L)
    vals = bi.freqs - fi[iu][:, :, None] * fi[ju][:, None, :]
    return CovarianceTable(vals, bi.L)


def msa_covariances(msa: Msa, pseudocount: float = 0.0) -> CovarianceTable:
    bi = bivariate_marginals(msa, pseudocount)
    return covariances(bi.univariate(), bi)


def table_to_csv(table) -> str:
    """Long-form CSV ``i,j,alpha,beta,value`` for marginal or covariance tables.

    Univariate tables leave ``j`` and ``beta`` empty.
    """
    buf = io.StringIO()
    buf.write("i,j,alpha,beta,value\n")
    if isinstance(table, UnivariateMarginals):
        for i in range(table.L):
            for a in range(table.q):
                buf.write(f"{i},,{a},,{table.freqs[i, a]:.17g}\n")
        return buf.getvalue()
    vals = table.values if isinstance(table, CovarianceTable) else table.freqs
    q = vals.shape[1]
    iu, ju = pair_indices(table.L)
    for p, (i, j) in enumerate(zip(iu.tolist(), ju.tolist())):
        for a in range(q):
            for b in range(q):
                buf.write(f"{i},{j},{a},{b},{vals[p, a, b]:.17g}\n")
    return buf.getvalue()


def triplet_covariance(msa: Msa, positions, residues, pseudocount: float = 0.0) -> float:
    """Three-body connected covariation from the cluster expansion.

    ``f^{ijk} - f^i C^{jk} - f^j C^{ik} - f^k C^{ij} - f^i f^j f^k``. The pair
    and triple frequencies use the same additive smoothing with ``q^2`` and
    ``q^3`` normalizers; single-site factors use ``q``.
    """
    i, j, k = (int(p) for p in positions)
    if len({i, j, k}) != 3:
        raise ValueError(f"positions must be distinct, got {positions}")
    if not (0 <= i < msa.L and 0 <= j < msa.L and 0 <= k < msa.L):
        raise IndexError(f"positions {positions} out of range for L={msa.L}")
    (i, a), (j, b), (k, c) = sorted(zip((i, j, k), residues))
    d = msa.data
    q, N, pc = msa.q, msa.N, pseudocount

    def smooth(count, K):
        return (count / N + pc) / (1.0 + K * pc)

    fi = smooth(np.count_nonzero(d[:, i] == a), q)
    fj = smooth(np.count_nonzero(d[:, j] == b), q)
    fk = smooth(np.count_nonzero(d[:, k] == c), q)
    fij = smooth(np.count_nonzero((d[:, i] == a) & (d[:, j] == b)), q * q)
    fik = smooth(np.count_nonzero((d[:, i] == a) & (d[:, k] == c)), q * q)
    fjk = smooth(np.count_nonzero((d[:, j] == b) & (d[:, k] == c)), q * q)
    fijk = smooth(np.count_nonzero((d[:, i] == a) & (d[:, j] == b) & (d[:, k] == c)), q ** 3)
    cij, cik, cjk = fij - fi * fj, fik - fi * fk, fjk - fj * fk
    return float(fijk - fi * cjk - fj * cik - fk * cij - fi * fj * fk)


# --------------------------------------------------------------------------
# Hamming distances


@dataclass(frozen=True, eq=False)
class DistanceHistogram:
    """Exact integer counts of pairwise Hamming distances ``0..L``."""

    counts: np.ndarray  # (L+1,) int64
    notes: tuple = field(default=())

    @property
    def L(self) -> int:
        return len(self.counts) - 1

    @property
    def total_pairs(self) -> int:
        return int(self.counts.sum())

    @property
    def normalized(self) -> np.ndarray:
        return self.counts / self.counts.sum()


@numba.njit(cache=True)
def _all_pair_distances(data, out):
    N, L = data.shape
    for a in range(N):
        ra = data[a]
        for b in range(a + 1, N):
            rb = data[b]
            d = 0
            for p in range(L):
                if ra[p] != rb[p]:
                    d += 1
            out[d] += 1


@numba.njit(cache=True)
def _listed_pair_distances(data, ia, ib, out):
    L = data.shape[1]
    for k in range(ia.shape[0]):
        ra = data[ia[k]]
        rb = data[ib[k]]
        d = 0
        for p in range(L):
            if ra[p] != rb[p]:
                d += 1
        out[d] += 1


def _unrank_pairs(k: np.ndarray, N: int):
    """Map linear indices over pairs ``a < b`` (row-major) back to ``(a, b)``."""
    # rows a hold N-1-a pairs; start(a) = a*(2N-a-1)/2
    a = np.floor((2 * N - 1 - np.sqrt((2 * N - 1) ** 2 - 8.0 * k)) / 2).astype(np.int64)
    start = a * (2 * N - a - 1) // 2
    # guard against floating point at row boundaries
    a = np.where(start > k, a - 1, a)
    start = a * (2 * N - a - 1) // 2
    nxt = (a + 1) * (2 * N - a - 2) // 2
    a = np.where(k >= nxt, a + 1, a)
    start = a * (2 * N - a - 1) // 2
    b = a + 1 + (k - start)
    return a, b


def hamming_distribution(msa: Msa, pair_budget=None, seed: int = 0) -> DistanceHistogram:
    """Histogram of pairwise Hamming distances.

    ``pair_budget=None`` (or ``"all"``) counts every pair; an integer budget
    samples that many distinct pairs uniformly without replacement.
    """
    N = msa.N
    if N < 2:
        raise AlignmentError("need at least two sequences")
    total = N * (N - 1) // 2
    counts = np.zeros(msa.L + 1, dtype=np.int64)
    notes = ()
    if isinstance(pair_budget, str):
        if pair_budget.lower() != "all":
            raise ValueError(f"pair_budget must be an integer or 'all', got {pair_budget!r}")
        pair_budget = None
    if pair_budget is not None and pair_budget > total:
        msg = f"pair_budget {pair_budget} exceeds {total} available pairs; counting all pairs"
        warnings.warn(msg)
        notes = (msg,)
        pair_budget = None
    if pair_budget is None:
        _all_pair_distances(msa.data, counts)
    else:
        rng = np.random.default_rng(seed)
        k = np.sort(rng.choice(total, size=int(pair_budget), replace=False))
        ia, ib = _unrank_pairs(k.astype(np.int64), N)
        _listed_pair_distances(msa.data, ia, ib, counts)
    return DistanceHistogram(counts, notes)
