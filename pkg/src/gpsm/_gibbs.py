"""Compiled kernels for single-site Gibbs sampling of Potts models."""

import numba
import numpy as np


def dense_couplings(J: np.ndarray, L: int) -> np.ndarray:
    """Expand pair-major ``J`` to ``W[i, j, b, a]``.

    ``W[i, j, b, a]`` is the coupling energy between ``s_i = a`` and
    ``s_j = b``; the layout keeps the inner loop over ``a`` contiguous.
    """
    q = J.shape[1]
    W = np.zeros((L, L, q, q))
    iu, ju = np.triu_indices(L, 1)
    W[iu, ju] = np.transpose(J, (0, 2, 1))
    W[ju, iu] = J
    return W


@numba.njit(cache=True)
def chain_energy(state, h, W):
    L = state.shape[0]
    e = 0.0
    for i in range(L):
        e += h[i, state[i]]
        for j in range(i + 1, L):
            e += W[i, j, state[j], state[i]]
    return e


@numba.njit(cache=True)
def gibbs_sweeps(states, h, W, u, trace):
    """Run ``u.shape[0]`` sweeps over every chain in place.

    ``u`` holds one uniform per (sweep, chain, site). ``trace`` receives the
    energy of chain 0 after each sweep.
    """
    n_sweeps, C, L = u.shape
    q = h.shape[1]
    e = np.empty(q)
    for s in range(n_sweeps):
        for c in range(C):
            st = states[c]
            for i in range(L):
                for a in range(q):
                    e[a] = h[i, a]
                for j in range(L):
                    if j != i:
                        b = st[j]
                        for a in range(q):
                            e[a] += W[i, j, b, a]
                emin = e[0]
                for a in range(1, q):
                    if e[a] < emin:
                        emin = e[a]
                tot = 0.0
                for a in range(q):
                    e[a] = np.exp(emin - e[a])
                    tot += e[a]
                r = u[s, c, i] * tot
                acc = 0.0
                pick = q - 1
                for a in range(q):
                    acc += e[a]
                    if r < acc:
                        pick = a
                        break
                st[i] = pick
        trace[s] = chain_energy(states[0], h, W)
