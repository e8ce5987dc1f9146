"""Compiled flat-metric kernels.

On the flat torus the tension only needs coordinate differences, so the
evaluation is fused into two passes over the grid.  Points are flattened in
C order and each point reads its stencil neighbours through a precomputed
table.  The arithmetic follows the array code in ``tensor`` term for term;
tests hold the two together.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np
from numba import njit


@lru_cache(maxsize=8)
def neighbour_table(shape: tuple) -> np.ndarray:
    """nbr[pt, p] = flat indices of the (+1, -1, +2, -2) neighbours along p."""
    idx = np.arange(int(np.prod(shape))).reshape(shape)
    out = np.zeros(idx.shape + (4, 4), dtype=np.int64)
    for p, n in enumerate(shape):
        for k, s in enumerate((1, -1, 2, -2)):
            out[..., p, k] = np.roll(idx, -s, axis=p)
    out = out.reshape(-1, 4, 4)
    out.setflags(write=False)
    return out


@njit(cache=True)
def _gradient(Jf, active, hs, nbr):
    npts = Jf.shape[0]
    dJ = np.zeros((4, npts, 16))
    for pt in range(npts):
        for k in range(active.shape[0]):
            p = active[k]
            a, b, c, d = nbr[pt, p, 0], nbr[pt, p, 1], nbr[pt, p, 2], nbr[pt, p, 3]
            s = 12.0 * hs[p]
            for q in range(16):
                dJ[p, pt, q] = (8.0 * (Jf[a, q] - Jf[b, q]) - (Jf[c, q] - Jf[d, q])) / s
    return dJ


@njit(cache=True)
def _tension(Jf, active, hs, nbr):
    dJ = _gradient(Jf, active, hs, nbr)
    npts = Jf.shape[0]
    T = np.empty_like(Jf)
    e = np.empty(npts)
    lap = np.empty(16)
    sq = np.empty(16)
    for pt in range(npts):
        lap[:] = 0.0
        sq[:] = 0.0
        g2 = 0.0
        for k in range(active.shape[0]):
            p = active[k]
            a, b, c, d = nbr[pt, p, 0], nbr[pt, p, 1], nbr[pt, p, 2], nbr[pt, p, 3]
            s = 12.0 * hs[p]
            for q in range(16):
                lap[q] += (8.0 * (dJ[p, a, q] - dJ[p, b, q]) - (dJ[p, c, q] - dJ[p, d, q])) / s
                v = dJ[p, pt, q]
                g2 += v * v
            for i in range(4):
                for j in range(4):
                    acc = 0.0
                    for m in range(4):
                        acc += dJ[p, pt, 4 * i + m] * dJ[p, pt, 4 * m + j]
                    sq[4 * i + j] += acc
        for i in range(4):
            for j in range(4):
                acc = 0.0
                for m in range(4):
                    acc += sq[4 * i + m] * Jf[pt, 4 * m + j]
                T[pt, 4 * i + j] = lap[4 * i + j] - acc
        e[pt] = 0.5 * g2
    return T, e


def flat_tension(J: np.ndarray, grid):
    """Tension and energy density 1/2 |DJ|^2 on the flat torus."""
    nbr = neighbour_table(grid.shape)
    Jf = np.ascontiguousarray(J, dtype=np.float64).reshape(-1, 16)
    T, e = _tension(Jf, np.array(grid.active_axes, dtype=np.int64), np.array(grid.spacing), nbr)
    return T.reshape(J.shape), e.reshape(grid.shape)
