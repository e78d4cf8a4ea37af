import time

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial.distance import cdist

from segrepro import oracles
from segrepro._validation import GridMismatchError
from segrepro.metrics import (
    UndefinedMetricError,
    dice,
    distance_field,
    extract_surface,
    hd95,
    pair_metrics,
    surface_dice,
)
from segrepro.roi import BinaryMask
from segrepro.selftest import random_mask_pair

ISO = (1.0, 1.0, 1.0)


def cube(dims, lo, hi):
    occ = np.zeros(dims, bool)
    occ[lo[0] : hi[0], lo[1] : hi[1], lo[2] : hi[2]] = True
    return occ


def literal_surface_dice(occ_a, occ_b, spacing, tol):
    """Written out straight from the definition with a full distance matrix."""
    pa = np.array(oracles.surface_oracle(occ_a), float) * spacing
    pb = np.array(oracles.surface_oracle(occ_b), float) * spacing
    d = cdist(pa, pb)
    hits = np.sum(d.min(axis=1) <= tol) + np.sum(d.min(axis=0) <= tol)
    return hits / (len(pa) + len(pb))


def literal_hd95(occ_a, occ_b, spacing):
    pa = np.array(oracles.surface_oracle(occ_a), float) * spacing
    pb = np.array(oracles.surface_oracle(occ_b), float) * spacing
    d = cdist(pa, pb)
    return max(np.percentile(d.min(axis=1), 95), np.percentile(d.min(axis=0), 95))


# ---- dice


def test_dice_shifted_cube_is_half():
    a = cube((20, 20, 20), (5, 5, 5), (15, 15, 15))
    b = cube((20, 20, 20), (10, 5, 5), (20, 15, 15))
    assert dice(BinaryMask(a, ISO), BinaryMask(b, ISO)) == 0.5


def test_dice_identical_and_disjoint():
    a = cube((8, 8, 8), (1, 1, 1), (4, 4, 4))
    b = cube((8, 8, 8), (5, 5, 5), (7, 7, 7))
    assert dice(BinaryMask(a, ISO), BinaryMask(a, ISO)) == 1.0
    assert dice(BinaryMask(a, ISO), BinaryMask(b, ISO)) == 0.0
    assert dice(BinaryMask(a, ISO), BinaryMask(np.zeros_like(a), ISO)) == 0.0
    with pytest.raises(UndefinedMetricError):
        dice(BinaryMask(np.zeros_like(a), ISO), BinaryMask(np.zeros_like(a), ISO))


def test_grid_mismatch():
    a = BinaryMask(np.ones((4, 4, 4), bool), ISO)
    with pytest.raises(GridMismatchError):
        dice(a, BinaryMask(np.ones((4, 4, 5), bool), ISO))
    with pytest.raises(GridMismatchError):
        surface_dice(a, BinaryMask(np.ones((4, 4, 4), bool), (1.0, 1.0, 1.1)))


# ---- surfaces


def test_cube_surface_counts():
    occ = cube((5, 5, 5), (1, 1, 1), (4, 4, 4))
    assert extract_surface(BinaryMask(occ, ISO)).count == 26
    single = cube((3, 3, 3), (1, 1, 1), (2, 2, 2))
    assert extract_surface(BinaryMask(single, ISO)).count == 1
    slab = np.ones((6, 6, 2), bool)
    assert extract_surface(BinaryMask(slab, ISO)).count == 72
    with pytest.raises(UndefinedMetricError):
        extract_surface(BinaryMask(np.zeros((3, 3, 3), bool), ISO))


def test_surface_points_are_physical():
    occ = cube((5, 5, 5), (2, 2, 2), (3, 3, 3))
    s = extract_surface(BinaryMask(occ, (0.8, 1.0, 1.2)))
    np.testing.assert_allclose(s.points, [[1.6, 2.0, 2.4]])


# ---- distance field


def test_distance_field_neighbours():
    occ = cube((3, 3, 3), (1, 1, 1), (2, 2, 2))
    s = extract_surface(BinaryMask(occ, (0.8, 1.0, 1.2)))
    f = distance_field(s, (3, 3, 3)).values
    assert f[1, 1, 1] == 0.0
    assert f[1, 2, 1] == pytest.approx(1.0, abs=1e-6)
    assert f[2, 1, 1] == pytest.approx(0.8, abs=1e-6)
    assert f[2, 2, 2] == pytest.approx(np.sqrt(0.64 + 1 + 1.44), abs=1e-6)


@pytest.mark.parametrize("seed", range(5))
def test_distance_field_matches_oracle(seed):
    r = np.random.default_rng(seed)
    spacing = tuple(r.uniform(0.5, 1.5, 3))
    occ = r.random((12, 12, 12)) < 0.1
    s = extract_surface(BinaryMask(occ, spacing))
    f = distance_field(s, occ.shape).values
    ref = oracles.distance_field_oracle(s.indices, occ.shape, spacing)
    np.testing.assert_allclose(f, ref, atol=1e-6, rtol=0)
    assert np.all(f[tuple(s.indices.T)] == 0)
    # 1-Lipschitz along each axis
    for ax in range(3):
        assert np.all(np.abs(np.diff(f, axis=ax)) <= spacing[ax] + 1e-9)


# ---- surface dice


def test_surface_dice_identical_and_large_tolerance():
    a = BinaryMask(cube((10, 10, 10), (2, 2, 2), (7, 6, 8)), (0.9, 1.1, 1.0))
    b = BinaryMask(cube((10, 10, 10), (3, 1, 2), (9, 5, 6)), (0.9, 1.1, 1.0))
    assert surface_dice(a, a, 0.1) == 1.0
    diag = np.linalg.norm(np.array([10, 10, 10]) * np.array(a.spacing))
    assert surface_dice(a, b, diag) == 1.0


def test_surface_dice_shared_denominator():
    big = cube((30, 30, 30), (2, 2, 2), (28, 28, 28))
    small = cube((30, 30, 30), (2, 2, 2), (5, 5, 5))
    a, b = BinaryMask(big, ISO), BinaryMask(small, ISO)
    d_ab = oracles.nearest_distances(np.argwhere(oracles_boundary(big)), np.argwhere(oracles_boundary(small)), ISO)
    d_ba = oracles.nearest_distances(np.argwhere(oracles_boundary(small)), np.argwhere(oracles_boundary(big)), ISO)
    shared = (np.sum(d_ab <= 1) + np.sum(d_ba <= 1)) / (d_ab.size + d_ba.size)
    averaged = (np.mean(d_ab <= 1) + np.mean(d_ba <= 1)) / 2
    got = surface_dice(a, b, 1.0)
    assert got == pytest.approx(shared, abs=1e-12)
    assert abs(got - averaged) > 0.05


def oracles_boundary(occ):
    out = np.zeros_like(occ)
    for p in oracles.surface_oracle(occ):
        out[p] = True
    return out


def test_surface_dice_shifted_cubes_literal():
    a = cube((20, 20, 20), (5, 5, 5), (15, 15, 15))
    b = cube((20, 20, 20), (7, 5, 5), (17, 15, 15))
    for tol in (0.5, 1.0, 2.0, 3.0):
        got = surface_dice(BinaryMask(a, ISO), BinaryMask(b, ISO), tol)
        assert got == pytest.approx(literal_surface_dice(a, b, np.ones(3), tol), abs=1e-9)


def test_surface_dice_tolerance_tie_counts_as_within():
    # boundary distances are exactly 0.1 * 3 = 0.30000000000000004 in floating point
    sp = (0.1, 0.1, 0.1)
    a = cube((12, 12, 12), (2, 2, 2), (8, 8, 8))
    b = cube((12, 12, 12), (5, 2, 2), (11, 8, 8))
    lit = literal_surface_dice(a, b, np.array(sp), 0.3 * (1 + 1e-9))
    assert surface_dice(BinaryMask(a, sp), BinaryMask(b, sp), 0.3) == pytest.approx(lit, abs=1e-12)


# ---- hd95


def test_hd95_identical_and_translation():
    occ = cube((20, 20, 20), (4, 4, 4), (12, 10, 9))
    a = BinaryMask(occ, (0.8, 1.0, 1.2))
    assert hd95(a, a) == 0.0
    b = BinaryMask(np.roll(occ, 3, axis=0), a.spacing)
    ref = hd95(a, b)
    a2 = BinaryMask(np.roll(occ, (2, 1, 3), axis=(0, 1, 2)), a.spacing)
    b2 = BinaryMask(np.roll(b.occupancy, (2, 1, 3), axis=(0, 1, 2)), a.spacing)
    assert hd95(a2, b2) == pytest.approx(ref, abs=1e-9)
    assert ref == pytest.approx(literal_hd95(occ, b.occupancy, np.array(a.spacing)), abs=1e-9)


# ---- combined


def test_pair_metrics_undefined():
    full = BinaryMask(cube((6, 6, 6), (1, 1, 1), (3, 3, 3)), ISO)
    empty = BinaryMask(np.zeros((6, 6, 6), bool), ISO)
    for a, b, reason in ((empty, full, "a_empty"), (full, empty, "b_empty"), (empty, empty, "both_empty")):
        m = pair_metrics(a, b)
        assert (m.dice, m.surface_dice, m.hd95) == (None, None, None)
        assert m.undefined_reason == reason
    assert pair_metrics(empty, full).volume_b_cm3 == pytest.approx(0.008)
    with pytest.raises(UndefinedMetricError):
        hd95(empty, full)


def test_pair_metrics_consistent_with_individual_calls():
    r = np.random.default_rng(3)
    a, b = random_mask_pair(r)
    m = pair_metrics(a, b, 1.5)
    assert m.dice == dice(a, b)
    assert m.surface_dice == surface_dice(a, b, 1.5)
    assert m.hd95 == hd95(a, b)
    assert m.as_dict()["tolerance_mm"] == 1.5


def test_tolerance_must_be_positive():
    a = BinaryMask(np.ones((3, 3, 3), bool), ISO)
    for bad in (0.0, -1.0, float("nan")):
        with pytest.raises(ValueError):
            surface_dice(a, a, bad)


def test_typical_roi_pair_is_fast():
    r = np.random.default_rng(0)
    grid = np.indices((40, 40, 40)).astype(float)
    centre = np.array([20, 20, 20])[:, None, None, None]
    rad = np.sqrt(((grid - centre) ** 2 / np.array([12, 9, 10])[:, None, None, None] ** 2).sum(axis=0))
    a = rad <= 1
    b = rad + r.normal(0, 0.03, rad.shape) <= 1
    assert 4000 <= a.sum() <= 5000
    pair_metrics(BinaryMask(a, ISO), BinaryMask(b, ISO))
    t0 = time.perf_counter()
    pair_metrics(BinaryMask(a, ISO), BinaryMask(b, ISO))
    assert time.perf_counter() - t0 < 0.5


# ---- properties


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_metric_laws(seed):
    r = np.random.default_rng(seed)
    a, b = random_mask_pair(r, min_dim=8, max_dim=12)
    m_ab, m_ba = pair_metrics(a, b), pair_metrics(b, a)
    assert m_ab.dice == m_ba.dice
    assert m_ab.surface_dice == m_ba.surface_dice
    assert m_ab.hd95 == m_ba.hd95
    assert 0 <= m_ab.dice <= 1 and 0 <= m_ab.surface_dice <= 1 and m_ab.hd95 >= 0
    sd = [surface_dice(a, b, t) for t in (0.25, 0.5, 1.0, 2.0, 4.0)]
    assert all(x <= y for x, y in zip(sd, sd[1:]))
    k = float(r.uniform(0.5, 3.0))
    a2, b2 = BinaryMask(a.occupancy, tuple(k * s for s in a.spacing)), BinaryMask(b.occupancy, tuple(k * s for s in b.spacing))
    assert dice(a2, b2) == m_ab.dice
    assert surface_dice(a2, b2, k * 1.0) == pytest.approx(m_ab.surface_dice, abs=1e-12)
    assert hd95(a2, b2) == pytest.approx(k * m_ab.hd95, rel=1e-9, abs=1e-9)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_metrics_match_oracles(seed):
    a, b = random_mask_pair(np.random.default_rng(seed), min_dim=8, max_dim=12)
    assert dice(a, b) == oracles.dice_oracle(a.occupancy, b.occupancy)
    assert surface_dice(a, b) == pytest.approx(
        literal_surface_dice(a.occupancy, b.occupancy, np.array(a.spacing), 1.0 * (1 + 1e-9)), abs=1e-9
    )
    assert hd95(a, b) == pytest.approx(literal_hd95(a.occupancy, b.occupancy, np.array(a.spacing)), abs=1e-6)
