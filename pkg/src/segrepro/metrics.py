"""Overlap and boundary-distance agreement between two binary masks.

All distances are physical (mm) and measured between boundary voxel centres.
A voxel is on the boundary when at least one of its six face neighbours lies
outside the mask; the edge of the grid counts as outside.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from ._edt import squared_edt
from ._validation import check_dims, check_same_grid, check_spacing, check_tolerance
from .roi import BinaryMask, mask_volume_cm3

DEFAULT_TOLERANCE_MM = 1.0
HD_PERCENTILE = 95.0
# distances within this relative margin of the tolerance count as inside it,
# so that float noise in scaled grids cannot flip an exact tie
TIE_RTOL = 1e-9


class UndefinedMetricError(ValueError):
    """A metric was requested on empty input where it has no value."""


@dataclass(frozen=True, eq=False)
class SurfacePointSet:
    indices: np.ndarray  # (n, 3) voxel indices, C order
    spacing: tuple[float, float, float]

    @property
    def count(self) -> int:
        return int(self.indices.shape[0])

    @property
    def points(self) -> np.ndarray:
        """Voxel centres in physical grid coordinates (mm)."""
        return self.indices * np.asarray(self.spacing)


@dataclass(frozen=True, eq=False)
class DistanceField:
    values: np.ndarray
    spacing: tuple[float, float, float]

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(d) for d in self.values.shape)


@dataclass(frozen=True)
class PairMetrics:
    dice: float | None
    surface_dice: float | None
    hd95: float | None
    volume_a_cm3: float
    volume_b_cm3: float
    tolerance_mm: float
    undefined_reason: str | None = None

    def as_dict(self) -> dict:
        return asdict(self)


def dice(a: BinaryMask, b: BinaryMask) -> float:
    """Volumetric overlap ``2|A∩B| / (|A| + |B|)`` from exact integer counts."""
    check_same_grid(a, b)
    na, nb = a.count, b.count
    if na + nb == 0:
        raise UndefinedMetricError("dice undefined: both masks are empty")
    inter = int(np.count_nonzero(a.occupancy & b.occupancy))
    return 2 * inter / (na + nb)


def boundary(occupancy: np.ndarray) -> np.ndarray:
    """Boolean array of mask voxels with a face neighbour outside the mask."""
    occ = np.asarray(occupancy, dtype=bool)
    padded = np.pad(occ, 1, constant_values=False)
    interior = occ.copy()
    c = slice(1, -1)
    interior &= padded[:-2, c, c]
    interior &= padded[2:, c, c]
    interior &= padded[c, :-2, c]
    interior &= padded[c, 2:, c]
    interior &= padded[c, c, :-2]
    interior &= padded[c, c, 2:]
    return occ & ~interior


def extract_surface(mask: BinaryMask) -> SurfacePointSet:
    if mask.is_empty():
        raise UndefinedMetricError("surface of an empty mask")
    return SurfacePointSet(np.argwhere(boundary(mask.occupancy)), mask.spacing)


def distance_field(surface: SurfacePointSet, dims, spacing=None) -> DistanceField:
    """Exact Euclidean distance (mm) from every voxel centre to ``surface``."""
    dims = check_dims(dims)
    spacing = check_spacing(surface.spacing if spacing is None else spacing)
    if surface.count == 0:
        raise UndefinedMetricError("distance field of an empty surface")
    idx = surface.indices
    if np.any(idx < 0) or np.any(idx >= np.asarray(dims)):
        raise ValueError("surface points fall outside the grid")
    sites = np.zeros(dims, dtype=bool)
    sites[idx[:, 0], idx[:, 1], idx[:, 2]] = True
    return DistanceField(np.sqrt(squared_edt(sites, spacing)), spacing)


def _bbox(occ: np.ndarray) -> tuple[slice, slice, slice]:
    out = []
    for axis in range(3):
        other = tuple(i for i in range(3) if i != axis)
        hits = np.flatnonzero(occ.any(axis=other))
        out.append(slice(int(hits[0]), int(hits[-1]) + 1))
    return tuple(out)


def directed_distances(a: BinaryMask, b: BinaryMask) -> tuple[np.ndarray, np.ndarray]:
    """Distances ``d(x, ∂B)`` for ``x ∈ ∂A`` and ``d(y, ∂A)`` for ``y ∈ ∂B``.

    Work is restricted to the joint bounding box, which leaves every
    boundary and every point-to-point distance unchanged.
    """
    check_same_grid(a, b)
    if a.is_empty() or b.is_empty():
        raise UndefinedMetricError("boundary distances need two non-empty masks")
    box = _bbox(a.occupancy | b.occupancy)
    surf_a = boundary(a.occupancy[box])
    surf_b = boundary(b.occupancy[box])
    sq_to_b = squared_edt(surf_b, a.spacing)
    sq_to_a = squared_edt(surf_a, a.spacing)
    return np.sqrt(sq_to_b[surf_a]), np.sqrt(sq_to_a[surf_b])


def _within(distances: np.ndarray, tolerance_mm: float) -> int:
    return int(np.count_nonzero(distances <= tolerance_mm * (1.0 + TIE_RTOL)))


def _surface_dice_from(d_ab, d_ba, tolerance_mm) -> float:
    return (_within(d_ab, tolerance_mm) + _within(d_ba, tolerance_mm)) / (d_ab.size + d_ba.size)


def _hd95_from(d_ab, d_ba) -> float:
    return float(max(np.percentile(d_ab, HD_PERCENTILE), np.percentile(d_ba, HD_PERCENTILE)))


def surface_dice(a: BinaryMask, b: BinaryMask, tolerance_mm: float = DEFAULT_TOLERANCE_MM) -> float:
    """Fraction of all boundary points of both masks within ``tolerance_mm`` of the other boundary.

    Both directions share the denominator ``|∂A| + |∂B|``.
    """
    tol = check_tolerance(tolerance_mm)
    d_ab, d_ba = directed_distances(a, b)
    return _surface_dice_from(d_ab, d_ba, tol)


def hd95(a: BinaryMask, b: BinaryMask) -> float:
    """Larger of the two directed 95th-percentile boundary distances (mm).

    Percentiles interpolate linearly between closest ranks.
    """
    d_ab, d_ba = directed_distances(a, b)
    return _hd95_from(d_ab, d_ba)


def pair_metrics(a: BinaryMask, b: BinaryMask, tolerance_mm: float = DEFAULT_TOLERANCE_MM) -> PairMetrics:
    """All agreement metrics for one mask pair, sharing one distance computation.

    If either mask is empty the similarity metrics are ``None`` and
    ``undefined_reason`` says which side was empty; volumes are always set.
    """
    check_same_grid(a, b)
    tol = check_tolerance(tolerance_mm)
    vol_a, vol_b = mask_volume_cm3(a), mask_volume_cm3(b)
    empty_a, empty_b = a.is_empty(), b.is_empty()
    if empty_a or empty_b:
        reason = "both_empty" if empty_a and empty_b else ("a_empty" if empty_a else "b_empty")
        return PairMetrics(None, None, None, vol_a, vol_b, tol, reason)
    d_ab, d_ba = directed_distances(a, b)
    return PairMetrics(
        dice=dice(a, b),
        surface_dice=_surface_dice_from(d_ab, d_ba, tol),
        hd95=_hd95_from(d_ab, d_ba),
        volume_a_cm3=vol_a,
        volume_b_cm3=vol_b,
        tolerance_mm=tol,
    )
