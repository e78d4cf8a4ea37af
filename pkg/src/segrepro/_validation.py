"""Input validation helpers shared by the estimators and metric functions."""

from __future__ import annotations

import numpy as np

SPACING_ATOL = 1e-6
AFFINE_NORM_ATOL = 1e-4


class GridMismatchError(ValueError):
    """Two inputs that must share a voxel grid do not."""


def check_spacing(spacing) -> tuple[float, float, float]:
    spacing = tuple(float(s) for s in np.asarray(spacing, dtype=float).ravel())
    if len(spacing) != 3:
        raise ValueError(f"spacing needs 3 components, got {len(spacing)}")
    if not all(np.isfinite(s) and s > 0 for s in spacing):
        raise ValueError(f"spacing components must be finite and positive, got {spacing}")
    return spacing


def check_affine(affine, spacing=None) -> np.ndarray:
    """Return a float copy of a 4x4 affine after checking its structure.

    When ``spacing`` is given, the column norms of the linear part must match
    it within 1e-4 mm.
    """
    aff = np.array(affine, dtype=float, copy=True)
    if aff.shape != (4, 4):
        raise ValueError(f"affine must be 4x4, got {aff.shape}")
    if not np.all(np.isfinite(aff)):
        raise ValueError("affine contains non-finite values")
    if not np.allclose(aff[3], [0, 0, 0, 1], atol=1e-8, rtol=0):
        raise ValueError(f"affine last row must be (0, 0, 0, 1), got {aff[3]}")
    aff[3] = (0.0, 0.0, 0.0, 1.0)
    if spacing is not None:
        norms = np.linalg.norm(aff[:3, :3], axis=0)
        if not np.allclose(norms, spacing, atol=AFFINE_NORM_ATOL, rtol=0):
            raise ValueError(f"affine column norms {norms} disagree with spacing {tuple(spacing)}")
    return aff


def check_dims(dims) -> tuple[int, int, int]:
    dims = tuple(int(d) for d in dims)
    if len(dims) != 3 or any(d < 1 for d in dims):
        raise ValueError(f"dims must be 3 positive integers, got {dims}")
    return dims


def check_same_grid(a, b) -> None:
    """Raise :class:`GridMismatchError` unless two masks share dims and spacing."""
    if a.dims != b.dims:
        raise GridMismatchError(f"grid mismatch: dims {a.dims} vs {b.dims}")
    if not np.allclose(a.spacing, b.spacing, atol=SPACING_ATOL, rtol=0):
        raise GridMismatchError(f"grid mismatch: spacing {a.spacing} vs {b.spacing}")


def check_tolerance(tolerance_mm) -> float:
    tol = float(tolerance_mm)
    if not np.isfinite(tol) or tol <= 0:
        raise ValueError(f"tolerance_mm must be positive, got {tolerance_mm!r}")
    return tol
