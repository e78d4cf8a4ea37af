"""Brute-force reference implementations used to cross-check the fast kernels.

These deliberately share no code with :mod:`segrepro.metrics` or
:mod:`segrepro.resample`: set arithmetic over voxel tuples, exhaustive
pairwise distances, explicit rank interpolation and per-voxel loops. They
are slow and only meant for small grids.
"""

from __future__ import annotations

import math

import numpy as np

_NEIGHBOURS = ((1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1))
TIE_RTOL = 1e-9


def voxel_set(occupancy) -> set[tuple[int, int, int]]:
    return {tuple(int(v) for v in idx) for idx in zip(*np.nonzero(occupancy))}


def dice_oracle(occ_a, occ_b) -> float:
    a, b = voxel_set(occ_a), voxel_set(occ_b)
    return 2 * len(a & b) / (len(a) + len(b))


def surface_oracle(occupancy) -> list[tuple[int, int, int]]:
    """Voxels with at least one face neighbour outside the set or the grid."""
    dims = np.asarray(occupancy).shape
    vox = voxel_set(occupancy)
    out = []
    for v in sorted(vox):
        for d in _NEIGHBOURS:
            n = (v[0] + d[0], v[1] + d[1], v[2] + d[2])
            inside = all(0 <= n[i] < dims[i] for i in range(3))
            if not inside or n not in vox:
                out.append(v)
                break
    return out


def nearest_distances(src, dst, spacing) -> np.ndarray:
    """For every point of ``src`` the minimum distance (mm) to any point of ``dst``.

    Squared distances are summed in x, y, z order from integer index offsets.
    """
    src = np.asarray(src, dtype=np.int64).reshape(-1, 3)
    dst = np.asarray(dst, dtype=np.int64).reshape(-1, 3)
    sx, sy, sz = (float(s) for s in spacing)
    out = np.empty(len(src))
    for start in range(0, len(src), 256):
        chunk = src[start : start + 256]
        dx = (chunk[:, None, 0] - dst[None, :, 0]) * sx
        dy = (chunk[:, None, 1] - dst[None, :, 1]) * sy
        dz = (chunk[:, None, 2] - dst[None, :, 2]) * sz
        sq = (dx * dx + dy * dy) + dz * dz
        out[start : start + 256] = np.sqrt(sq.min(axis=1))
    return out


def distance_field_oracle(sites, dims, spacing) -> np.ndarray:
    grid = np.stack(np.meshgrid(*(np.arange(d) for d in dims), indexing="ij"), axis=-1).reshape(-1, 3)
    return nearest_distances(grid, sites, spacing).reshape(dims)


def percentile_oracle(values, q: float) -> float:
    """Inclusive linear interpolation between closest ranks."""
    xs = sorted(float(v) for v in values)
    if not xs:
        raise ValueError("percentile of an empty set")
    h = (len(xs) - 1) * q / 100.0
    lo = math.floor(h)
    hi = min(lo + 1, len(xs) - 1)
    return xs[lo] + (h - lo) * (xs[hi] - xs[lo])


def surface_dice_oracle(occ_a, occ_b, spacing, tolerance_mm: float) -> float:
    sa, sb = surface_oracle(occ_a), surface_oracle(occ_b)
    d_ab = nearest_distances(sa, sb, spacing)
    d_ba = nearest_distances(sb, sa, spacing)
    limit = tolerance_mm * (1.0 + TIE_RTOL)
    hits = sum(1 for d in d_ab if d <= limit) + sum(1 for d in d_ba if d <= limit)
    return hits / (len(sa) + len(sb))


def hd95_oracle(occ_a, occ_b, spacing) -> float:
    sa, sb = surface_oracle(occ_a), surface_oracle(occ_b)
    return max(
        percentile_oracle(nearest_distances(sa, sb, spacing), 95.0),
        percentile_oracle(nearest_distances(sb, sa, spacing), 95.0),
    )


def _round_half_away(x: float) -> int:
    return int(math.floor(abs(x) + 0.5)) * (1 if x >= 0 else -1)


def resample_oracle(moving_labels, moving_affine, matrix, ref_dims, ref_affine) -> np.ndarray:
    """Per-voxel nearest-neighbour pull resampling with explicit loops."""
    inv_moving = np.linalg.inv(np.asarray(moving_affine, dtype=float))
    full = inv_moving @ np.asarray(matrix, dtype=float) @ np.asarray(ref_affine, dtype=float)
    src = np.asarray(moving_labels)
    out = np.zeros(tuple(ref_dims), dtype=src.dtype)
    for i in range(ref_dims[0]):
        for j in range(ref_dims[1]):
            for k in range(ref_dims[2]):
                p = full @ np.array([i, j, k, 1.0])
                idx = [_round_half_away(p[n]) for n in range(3)]
                if all(0 <= idx[n] < src.shape[n] for n in range(3)):
                    out[i, j, k] = src[idx[0], idx[1], idx[2]]
    return out
