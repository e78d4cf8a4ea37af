"""Cross-check the fast kernels against the brute-force oracles."""

from __future__ import annotations

import numpy as np

from . import metrics, oracles
from .resample import AffineTransform, ReferenceGrid, resample_labels
from .roi import BinaryMask
from .volume_io import LabelVolume

DIST_ATOL = 1e-6
REL_TOL = 1e-9


def random_mask_pair(rng, min_dim=12, max_dim=16, spacing_range=(0.7, 1.2)):
    """Two non-empty random masks on one anisotropic grid.

    Masks are thresholded smoothed noise so they have blob-like regions
    as well as scattered voxels.
    """
    dims = tuple(int(d) for d in rng.integers(min_dim, max_dim + 1, size=3))
    spacing = tuple(float(s) for s in rng.uniform(*spacing_range, size=3))
    out = []
    for _ in range(2):
        while True:
            field = rng.random(dims)
            for ax in range(3):
                field = (field + np.roll(field, 1, axis=ax) + np.roll(field, -1, axis=ax)) / 3.0
            occ = field > np.quantile(field, rng.uniform(0.5, 0.9))
            if occ.any():
                break
        out.append(occ)
    return BinaryMask(out[0], spacing), BinaryMask(out[1], spacing)


def check_metric_pair(a: BinaryMask, b: BinaryMask, tolerance_mm: float = 1.0) -> list[str]:
    errors = []
    d_fast = metrics.dice(a, b)
    d_ref = oracles.dice_oracle(a.occupancy, b.occupancy)
    if d_fast != d_ref:
        errors.append(f"dice {d_fast!r} != oracle {d_ref!r}")
    s_fast = metrics.surface_dice(a, b, tolerance_mm)
    s_ref = oracles.surface_dice_oracle(a.occupancy, b.occupancy, a.spacing, tolerance_mm)
    if abs(s_fast - s_ref) > REL_TOL * max(1.0, abs(s_ref)):
        errors.append(f"surface_dice {s_fast!r} != oracle {s_ref!r}")
    h_fast = metrics.hd95(a, b)
    h_ref = oracles.hd95_oracle(a.occupancy, b.occupancy, a.spacing)
    if abs(h_fast - h_ref) > DIST_ATOL:
        errors.append(f"hd95 {h_fast!r} != oracle {h_ref!r}")
    surf = metrics.extract_surface(a)
    if sorted(map(tuple, surf.indices.tolist())) != oracles.surface_oracle(a.occupancy):
        errors.append("surface voxel set differs from oracle")
    field = metrics.distance_field(surf, a.dims).values
    ref = oracles.distance_field_oracle(surf.indices, a.dims, a.spacing)
    if np.max(np.abs(field - ref)) > DIST_ATOL:
        errors.append(f"distance field off by {np.max(np.abs(field - ref)):.3g} mm")
    return errors


def check_resample(rng) -> list[str]:
    dims = tuple(int(d) for d in rng.integers(6, 11, size=3))
    spacing = tuple(float(s) for s in rng.uniform(0.7, 1.2, size=3))
    labels = rng.integers(0, 5, size=dims)
    vol = LabelVolume.from_array(labels, spacing)
    ref = ReferenceGrid.from_volume(vol)
    errors = []
    if not np.array_equal(resample_labels(vol, AffineTransform.identity(), ref).labels, vol.labels):
        errors.append("identity resampling is not a no-op")
    shift = np.eye(4)
    axis = int(rng.integers(0, 3))
    shift[axis, 3] = spacing[axis] * int(rng.choice([-1, 1]))
    fast = resample_labels(vol, AffineTransform(shift), ref).labels
    slow = oracles.resample_oracle(vol.labels, vol.affine, shift, ref.dims, ref.affine)
    if not np.array_equal(fast, slow):
        errors.append("translation resampling differs from per-voxel oracle")
    if not set(np.unique(fast)) <= set(np.unique(labels)):
        errors.append("resampling invented labels")
    return errors


def run_selftest(seed: int = 0, n_pairs: int = 25, report=print) -> bool:
    rng = np.random.default_rng(seed)
    ok = True
    failures = 0
    for i in range(n_pairs):
        a, b = random_mask_pair(rng)
        errs = check_metric_pair(a, b)
        if errs:
            failures += 1
            report(f"FAIL metric pair {i}: {'; '.join(errs)}")
    report(f"{'PASS' if failures == 0 else 'FAIL'} metrics vs oracles: {n_pairs - failures}/{n_pairs} pairs")
    ok &= failures == 0
    failures = 0
    n_res = max(1, n_pairs // 5)
    for i in range(n_res):
        errs = check_resample(rng)
        if errs:
            failures += 1
            report(f"FAIL resample case {i}: {'; '.join(errs)}")
    report(f"{'PASS' if failures == 0 else 'FAIL'} resampling vs oracle: {n_res - failures}/{n_res} cases")
    ok &= failures == 0
    return ok
