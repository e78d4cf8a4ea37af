"""Exact squared Euclidean distance transform on anisotropic grids.

Separable lower-envelope-of-parabolas algorithm (Felzenszwalb & Huttenlocher),
one pass per axis in x, y, z order. Squared distances accumulate as
``((dx*sx)**2 + (dy*sy)**2) + (dz*sz)**2`` so results are reproducible
bit-for-bit by a brute-force evaluation using the same expression.
"""

from __future__ import annotations

import numpy as np
from numba import njit

INF = np.inf


@njit(cache=True, nogil=True)
def _envelope_1d(f, n, s, out, v, z):
    k = -1
    for q in range(n):
        fq = f[q]
        if fq == INF:
            continue
        xq = q * s
        while k >= 0:
            p = v[k]
            xp = p * s
            sint = ((fq + xq * xq) - (f[p] + xp * xp)) / (2.0 * (xq - xp))
            if sint <= z[k]:
                k -= 1
            else:
                break
        k += 1
        v[k] = q
        if k == 0:
            z[0] = -INF
        else:
            p = v[k - 1]
            xp = p * s
            z[k] = ((fq + xq * xq) - (f[p] + xp * xp)) / (2.0 * (xq - xp))
        z[k + 1] = INF
    if k < 0:
        for q in range(n):
            out[q] = INF
        return
    last = k
    k = 0
    for q in range(n):
        xq = q * s
        while z[k + 1] < xq:
            k += 1
        # guard against breakpoint rounding: take the best of the neighbouring parabolas
        p = v[k]
        d = (q - p) * s
        best = f[p] + d * d
        if k > 0:
            p = v[k - 1]
            d = (q - p) * s
            cand = f[p] + d * d
            if cand < best:
                best = cand
        if k < last:
            p = v[k + 1]
            d = (q - p) * s
            cand = f[p] + d * d
            if cand < best:
                best = cand
        out[q] = best


@njit(cache=True, nogil=True)
def _edt_axis(grid, axis, s):
    nx, ny, nz = grid.shape
    if axis == 0:
        n, m1, m2 = nx, ny, nz
    elif axis == 1:
        n, m1, m2 = ny, nx, nz
    else:
        n, m1, m2 = nz, nx, ny
    f = np.empty(n)
    out = np.empty(n)
    v = np.empty(n, dtype=np.int64)
    z = np.empty(n + 1)
    for a in range(m1):
        for b in range(m2):
            if axis == 0:
                for i in range(n):
                    f[i] = grid[i, a, b]
            elif axis == 1:
                for i in range(n):
                    f[i] = grid[a, i, b]
            else:
                for i in range(n):
                    f[i] = grid[a, b, i]
            _envelope_1d(f, n, s, out, v, z)
            if axis == 0:
                for i in range(n):
                    grid[i, a, b] = out[i]
            elif axis == 1:
                for i in range(n):
                    grid[a, i, b] = out[i]
            else:
                for i in range(n):
                    grid[a, b, i] = out[i]


def squared_edt(sites: np.ndarray, spacing) -> np.ndarray:
    """Squared physical distance from every voxel centre to the nearest site.

    ``sites`` is a 3D boolean array. Returns ``inf`` everywhere when empty.
    """
    grid = np.where(sites, 0.0, INF)
    for axis in range(3):
        _edt_axis(grid, axis, float(spacing[axis]))
    return grid
