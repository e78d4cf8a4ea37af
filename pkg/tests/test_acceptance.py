"""Acceptance suite: one test per criterion, each reporting a PASS/FAIL line."""

import gzip
import json
import os
import resource
import time
import tracemalloc

import numpy as np
from scipy.spatial.distance import cdist

from conftest import ACCEPTANCE_RESULTS
from segrepro import oracles
from segrepro.cli import main
from segrepro.harness import compare_volumes
from segrepro.metrics import dice, extract_surface, hd95, pair_metrics, surface_dice
from segrepro.report import RunConfig
from segrepro.resample import AffineTransform, ReferenceGrid, resample_labels
from segrepro.roi import BinaryMask, Side, default_registry
from segrepro.selftest import random_mask_pair
from segrepro.stats import FilterRule, fit_trend, mape
from segrepro.synth import generate_dataset
from segrepro.volume_io import LabelVolume, NiftiError, encode_nifti, read_label_volume, write_label_volume

ISO = (1.0, 1.0, 1.0)
R2_BAND = (0.001246, 0.312156)  # tests/oracles/trend_band.py, 20000 draws


def verdict(name, ok, detail=""):
    line = f"{'PASS' if ok else 'FAIL'} {name}" + (f": {detail}" if detail else "")
    ACCEPTANCE_RESULTS[name] = line
    print(line)
    assert ok, line


def crop_pad(occ_a, occ_b):
    """Crop both masks to their joint box plus a background margin; boundaries are unchanged."""
    idx = np.argwhere(occ_a | occ_b)
    lo, hi = idx.min(axis=0), idx.max(axis=0) + 1
    sl = tuple(slice(a, b) for a, b in zip(lo, hi))
    return np.pad(occ_a[sl], 1), np.pad(occ_b[sl], 1)


def test_criterion_01_oracle_equivalence():
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    bad = []
    for i in range(200):
        a, b = random_mask_pair(rng, 12, 16, (0.7, 1.2))
        if dice(a, b) != oracles.dice_oracle(a.occupancy, b.occupancy):
            bad.append((i, "dice"))
        s_ref = oracles.surface_dice_oracle(a.occupancy, b.occupancy, a.spacing, 1.0)
        if abs(surface_dice(a, b, 1.0) - s_ref) > 1e-9 * max(1.0, s_ref):
            bad.append((i, "surface_dice"))
        if abs(hd95(a, b) - oracles.hd95_oracle(a.occupancy, b.occupancy, a.spacing)) > 1e-6:
            bad.append((i, "hd95"))
    elapsed = time.perf_counter() - t0
    verdict("01 oracle equivalence", not bad and elapsed < 60, f"200 pairs, {len(bad)} mismatches, {elapsed:.1f} s")


def test_criterion_02_analytic_cases():
    a = np.zeros((4, 4, 4), bool)
    a[0:2, 0:2, 0:2] = True
    b = np.roll(a, 1, axis=0)
    d_shift = dice(BinaryMask(a, ISO), BinaryMask(b, ISO))
    m_self = pair_metrics(BinaryMask(a, ISO), BinaryMask(a, ISO))
    c = np.zeros((5, 5, 5), bool)
    c[1:4, 1:4, 1:4] = True
    n_surf = extract_surface(BinaryMask(c, ISO)).count
    ok = d_shift == 0.5 and (m_self.dice, m_self.surface_dice, m_self.hd95) == (1.0, 1.0, 0.0) and n_surf == 26
    verdict("02 analytic cases", ok, f"shifted dice {d_shift}, self {m_self.dice}/{m_self.surface_dice}/{m_self.hd95}, cube surface {n_surf}")


def test_criterion_03_metric_laws():
    rng = np.random.default_rng(7)
    taus = np.linspace(0.1, 5.0, 20)
    fails = []
    for i in range(500):
        a, b = random_mask_pair(rng, 8, 14, (0.7, 1.2))
        m_ab, m_ba = pair_metrics(a, b), pair_metrics(b, a)
        if abs(m_ab.dice - m_ba.dice) > 1e-9 or abs(m_ab.surface_dice - m_ba.surface_dice) > 1e-9 or abs(m_ab.hd95 - m_ba.hd95) > 1e-9:
            fails.append((i, "symmetry"))
        sd = [surface_dice(a, b, t) for t in taus]
        if any(x > y + 1e-9 for x, y in zip(sd, sd[1:])):
            fails.append((i, "monotone"))
        c = float(rng.uniform(0.5, 3.0))
        a2 = BinaryMask(a.occupancy, tuple(c * s for s in a.spacing))
        b2 = BinaryMask(b.occupancy, tuple(c * s for s in b.spacing))
        m2 = pair_metrics(a2, b2, c * 1.0)
        if abs(m2.dice - m_ab.dice) > 1e-9 or abs(m2.surface_dice - m_ab.surface_dice) > 1e-9 or abs(m2.hd95 - c * m_ab.hd95) > 1e-9:
            fails.append((i, "scaling"))
    verdict("03 metric laws", not fails, f"500 pairs, {len(fails)} violations {fails[:3]}")


def test_criterion_04_literal_forms():
    m = mape([1.0, 1.1, 0.9], [1.0, 1.0, 1.0])
    ok_mape = abs(m - 20.0 / 3.0) <= 1e-9

    def literal_sdice(occ_a, occ_b, spacing, tau):
        pa = np.array(oracles.surface_oracle(occ_a), float) * spacing
        pb = np.array(oracles.surface_oracle(occ_b), float) * spacing
        d = cdist(pa, pb)
        return (np.sum(d.min(axis=1) <= tau) + np.sum(d.min(axis=0) <= tau)) / (len(pa) + len(pb))

    rng = np.random.default_rng(44)
    worst = 0.0
    for _ in range(30):
        a, b = random_mask_pair(rng, 10, 14)
        worst = max(worst, abs(surface_dice(a, b, 1.0) - literal_sdice(a.occupancy, b.occupancy, np.array(a.spacing), 1.0 * (1 + 1e-9))))
    # unequal surfaces: shared denominator differs from averaging the two directions
    big = np.zeros((30, 30, 30), bool)
    big[2:28, 2:28, 2:28] = True
    small = np.zeros_like(big)
    small[2:5, 2:5, 2:5] = True
    shared = surface_dice(BinaryMask(big, ISO), BinaryMask(small, ISO), 1.0)
    ok_shared = abs(shared - literal_sdice(big, small, np.ones(3), 1.0)) <= 1e-12
    verdict("04 literal MAPE and surface dice forms", ok_mape and worst <= 1e-9 and ok_shared, f"MAPE {m:.12f}, max |sdice - literal form| {worst:.2g}")


def test_criterion_05_resampling():
    rng = np.random.default_rng(5)
    fails = []
    for i in range(50):
        dims = tuple(int(d) for d in rng.integers(5, 12, 3))
        sp = tuple(float(s) for s in rng.uniform(0.7, 1.2, 3))
        labels = rng.choice([0, 10, 17, 53, 1035], size=dims)
        vol = LabelVolume.from_array(labels, sp)
        ref = ReferenceGrid.from_volume(vol)
        if not np.array_equal(resample_labels(vol, AffineTransform.identity(), ref).labels, labels):
            fails.append((i, "identity"))
        shift = np.eye(4)
        ax = int(rng.integers(0, 3))
        shift[ax, 3] = sp[ax] * float(rng.choice([-1, 1]))
        fast = resample_labels(vol, AffineTransform(shift), ref).labels
        if not np.array_equal(fast, oracles.resample_oracle(labels, vol.affine, shift, dims, vol.affine)):
            fails.append((i, "translation"))
        m = np.eye(4)
        m[:3, :3] += rng.normal(0, 0.3, (3, 3))
        m[:3, 3] = rng.normal(0, 2, 3)
        if not set(np.unique(resample_labels(vol, AffineTransform(m), ref).labels)) <= set(np.unique(labels)) | {0}:
            fails.append((i, "invented"))
    verdict("05 resampling", not fails, f"50 volumes, {len(fails)} failures")


CORRUPT = [
    ("01", "04", "Hippocampus", "left"),
    ("01", "04", "Putamen", "right"),
    ("01", "04", "Thalamus", "left"),
    ("02", "03", "Caudate", "right"),
    ("02", "03", "Amygdala", "left"),
]


def _synth_spec(shells):
    return {
        "noise_flip_fraction": 0.03,
        "subjects": [
            {"id": "01", "sessions": 4, "interval_days": 30, "scanners": ["scannerA"]},
            {"id": "02", "sessions": 3, "interval_days": 14, "scanners": ["scannerA", "scannerB"]},
        ],
        "perturbations": [
            {"subject": s, "session": ses, "roi": roi, "side": side, "erode": shells[(s, roi, side)]}
            for s, ses, roi, side in CORRUPT
        ],
    }


def _oracle_sdice_table(root):
    """Brute-force surface dice for every consecutive pair record of a synthetic corpus."""
    reg = default_registry()
    vols = {p.name.split("_dseg")[0]: read_label_volume(p) for p in root.rglob("*_dseg.nii.gz")}
    table = {}
    for sub, n in (("01", 4), ("02", 3)):
        for k in range(1, n):
            a, b = vols[f"sub-{sub}_ses-{k:02d}"], vols[f"sub-{sub}_ses-{k + 1:02d}"]
            for spec in reg:
                for side in (Side.LEFT, Side.RIGHT):
                    ids = sorted(spec.ids(side))
                    oa, ob = crop_pad(np.isin(a.labels, ids), np.isin(b.labels, ids))
                    s = oracles.surface_dice_oracle(oa, ob, a.spacing, 1.0)
                    table[(sub, f"{k:02d}", f"{k + 1:02d}", spec.name, side.value)] = s
    return table


def test_criterion_06_synthetic_audit(tmp_path):
    t0 = time.perf_counter()
    # erode each target by more shells until the brute-force check falls below 0.92
    shells = {(s, roi, side): 1 for s, _, roi, side in CORRUPT}
    for _ in range(5):
        root = tmp_path / f"ds{max(shells.values())}_{sum(shells.values())}"
        spec_path = tmp_path / "spec.json"
        spec_path.write_text(json.dumps(_synth_spec(shells)))
        assert main(["synth", "--out", str(root), "--seed", "11", "--spec", str(spec_path)]) == 0
        table = _oracle_sdice_table(root)
        pending = [
            (s, roi, side)
            for s, ses, roi, side in CORRUPT
            if table[(s, f"{int(ses) - 1:02d}", ses, roi, side)] >= 0.92
        ]
        if not pending:
            break
        for key in pending:
            shells[key] += 1
    injected = {(s, f"{int(ses) - 1:02d}", ses, roi, side) for s, ses, roi, side in CORRUPT}
    oracle_low = {k for k, v in table.items() if v < 0.92}

    thresholds = (0.85, 0.90, 0.92, 0.95)
    cfg = RunConfig(
        dataset_root=str(root),
        output_dir=str(tmp_path / "out"),
        filter_rules=[FilterRule("surface_dice", t, "subcortical") for t in thresholds],
        jobs=1,
    )
    cfg.save(tmp_path / "run.json")
    assert main(["batch", str(tmp_path / "run.json")]) == 0
    rules = json.loads((tmp_path / "out" / "filter_report.json").read_text())["rules"]
    removed = {
        r["rule"]["threshold"]: {(x["subject_id"], x["session_a"], x["session_b"], x["roi"], x["side"]) for x in r["removed"]}
        for r in rules
    }
    nested = all(removed[a] <= removed[b] for a, b in zip(thresholds, thresholds[1:]))
    elapsed = time.perf_counter() - t0
    ok = oracle_low == injected and removed[0.92] == injected and nested and elapsed < 300
    verdict(
        "06 synthetic audit",
        ok,
        f"erosion shells {sorted(shells.values())}, oracle<0.92: {len(oracle_low)}, "
        f"removed at 0.92: {len(removed[0.92])}, nested {nested}, {elapsed:.1f} s",
    )


def test_criterion_07_trend_recovery():
    t = np.linspace(0.0, 17.0, 73)
    exact = fit_trend(t, 4.5 + 0.01 * t)
    ok_exact = exact.r_squared == 1.0 and abs(exact.slope - 0.01) <= 1e-12
    rng = np.random.default_rng(20240517)
    noisy = fit_trend(t, 4.5 + 0.01 * t + rng.normal(0.0, 0.15, t.size))
    ok_noisy = abs(noisy.slope - 0.01) <= 3 * noisy.slope_stderr and R2_BAND[0] <= noisy.r_squared <= R2_BAND[1]
    verdict(
        "07 trend recovery",
        ok_exact and ok_noisy,
        f"noiseless R2 {exact.r_squared}, slope err {abs(exact.slope - 0.01):.1e}; "
        f"noisy slope {noisy.slope:.5f} +/- {noisy.slope_stderr:.5f}, R2 {noisy.r_squared:.4f}",
    )


def test_criterion_08_determinism(tmp_path):
    spec = {
        "noise_flip_fraction": 0.05,
        "subjects": [{"id": "01", "sessions": 4}, {"id": "02", "sessions": 3, "scanners": ["A", "B"]}],
    }
    generate_dataset(tmp_path / "ds", seed=21, spec=spec)
    outputs = []
    for jobs in (1, 4, os.cpu_count() or 1, 1):
        out = tmp_path / f"out{len(outputs)}"
        assert main(["batch", "--root", str(tmp_path / "ds"), "--out", str(out), "--jobs", str(jobs)]) == 0
        outputs.append({p.name: p.read_bytes() for p in sorted(out.iterdir())})
    ok = all(o == outputs[0] for o in outputs) and len(outputs[0]) == 4
    verdict("08 determinism", ok, f"jobs 1, 4, {os.cpu_count()} and a rerun")


def _big_pair(rng):
    """Two 256^3 label volumes with one ellipsoid per ROI side; B is a noisy, slightly shifted copy."""
    reg = default_registry()
    a = np.zeros((256, 256, 256), np.int32)
    b = np.zeros_like(a)
    k = 0
    for spec in reg:
        for h, side in enumerate((Side.LEFT, Side.RIGHT)):
            label = min(spec.ids(side))
            cx = 64 + 128 * h
            cy, cz = 30 + 48 * (k % 5), 30 + 48 * (k // 5 % 5)
            k += 1 if h else 0
            r = np.array([14, 20, 12]) if spec.roi_class.value == "cortical" else np.array([8, 12, 9])
            lo = np.array([cx, cy, cz]) - r - 2
            g = np.ogrid[tuple(slice(l, l + 2 * rr + 5) for l, rr in zip(lo, r))]
            inside_a = sum(((g[i] - c) / r[i]) ** 2 for i, c in enumerate((cx, cy, cz))) <= 1
            inside_b = sum(((g[i] - c - (i == 0)) / r[i]) ** 2 for i, c in enumerate((cx, cy, cz))) <= 1.0 + rng.normal(0, 0.02)
            box = tuple(slice(l, l + 2 * rr + 5) for l, rr in zip(lo, r))
            a[box][inside_a] = label
            b[box][inside_b] = label
    return a, b


def test_criterion_09_performance(tmp_path):
    rng = np.random.default_rng(9)
    a, b = _big_pair(rng)
    write_label_volume(LabelVolume.from_array(a), tmp_path / "a.nii.gz")
    write_label_volume(LabelVolume.from_array(b), tmp_path / "b.nii.gz")
    reg = default_registry()
    # compile and cache the kernels outside the timed region
    small = LabelVolume.from_array(a[:40, :40, :40])
    compare_volumes(small, small, reg, (Side.LEFT,), 1.0)
    del a, b
    tracemalloc.start()
    t0 = time.perf_counter()
    va, vb = read_label_volume(tmp_path / "a.nii.gz"), read_label_volume(tmp_path / "b.nii.gz")
    results = compare_volumes(va, vb, reg, (Side.LEFT, Side.RIGHT), 1.0)
    elapsed = time.perf_counter() - t0
    _, peak = tracemalloc.get_traced_memory()
    tracemalloc.stop()
    rss_gb = resource.getrusage(resource.RUSAGE_SELF).ru_maxrss / 1024**2
    defined = all(m.dice is not None and 0.3 < m.dice < 1.0 for _, _, m in results)
    ok = len(results) == 34 and defined and elapsed < 10 and peak < 2 * 1024**3 and rss_gb < 2
    verdict("09 performance", ok, f"34 ROI-sides in {elapsed:.2f} s, traced peak {peak / 1024**2:.0f} MB, max RSS {rss_gb:.2f} GB")


def test_criterion_10_io(tmp_path):
    rng = np.random.default_rng(10)
    mismatches = 0
    for i in range(100):
        dims = tuple(int(d) for d in rng.integers(1, 24, 3))
        top = int(rng.choice([5, 200, 3000, 70000]))
        labels = rng.integers(0, top + 1, dims)
        sp = tuple(float(s) for s in rng.uniform(0.5, 2.0, 3))
        rot, _ = np.linalg.qr(rng.normal(size=(3, 3)))
        aff = np.eye(4)
        aff[:3, :3] = rot * np.array(sp)
        aff[:3, 3] = rng.uniform(-120, 120, 3)
        vol = LabelVolume(labels, sp, aff)
        path = tmp_path / f"v{i}.nii{'.gz' if i % 2 else ''}"
        write_label_volume(vol, path)
        back = read_label_volume(path)
        if not (
            np.array_equal(back.labels, labels)
            and np.allclose(back.spacing, sp, atol=1e-6)
            and np.allclose(back.affine, aff, atol=1e-4)
        ):
            mismatches += 1
    payload = encode_nifti(LabelVolume.from_array(rng.integers(0, 60, (9, 8, 7))))
    (tmp_path / "p.nii").write_bytes(payload)
    (tmp_path / "p.nii.gz").write_bytes(gzip.compress(payload))
    pa, pg = read_label_volume(tmp_path / "p.nii"), read_label_volume(tmp_path / "p.nii.gz")
    parity = np.array_equal(pa.labels, pg.labels) and pa.spacing == pg.spacing and np.array_equal(pa.affine, pg.affine)
    rejected = 0
    for cut in (10, 300, len(payload) - 1):
        for gz in (False, True):
            p = tmp_path / f"t{cut}.nii{'.gz' if gz else ''}"
            p.write_bytes(gzip.compress(payload[:cut]) if gz else payload[:cut])
            try:
                read_label_volume(p)
            except NiftiError:
                rejected += 1
    ok = mismatches == 0 and parity and rejected == 6
    verdict("10 NIfTI I/O", ok, f"100 round trips, {mismatches} mismatches, parity {parity}, {rejected}/6 truncations rejected")
