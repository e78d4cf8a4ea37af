"""Seeded synthetic BIDS-like label datasets with known perturbations.

Every ROI side becomes a digital ellipsoid ("blob") laid out on a regular
grid, left hemisphere in the lower x half and right in the upper half.
Sessions copy the base anatomy and then apply the perturbations listed in
the spec; a ``manifest.json`` records exactly what was injected.
"""

from __future__ import annotations

import copy
import datetime as dt
import json
import math
from pathlib import Path

import numpy as np

from .metrics import boundary
from .roi import RoiRegistry, Side, default_registry
from .volume_io import LabelVolume, write_label_volume

DEFAULT_SPEC = {
    "spacing": [1.0, 1.0, 1.0],
    "radius_vox": [4, 5, 4],
    "margin_vox": 3,
    "rois": None,
    "noise_flip_fraction": 0.0,
    "subjects": [
        {
            "id": "01",
            "sessions": 5,
            "start_date": "2020-01-06",
            "interval_days": 1,
            "scanners": ["scannerA"],
            "echo_time_s": 0.003,
            "repetition_time_s": 2.3,
        }
    ],
    "perturbations": [],
}


class SynthSpecError(ValueError):
    pass


def _ellipsoid(radii) -> np.ndarray:
    rx, ry, rz = radii
    x, y, z = np.ogrid[-rx : rx + 1, -ry : ry + 1, -rz : rz + 1]
    return (x / (rx + 0.5)) ** 2 + (y / (ry + 0.5)) ** 2 + (z / (rz + 0.5)) ** 2 <= 1.0


def load_spec(spec) -> dict:
    """Merge a user spec (dict or JSON path) over :data:`DEFAULT_SPEC`."""
    if spec is None:
        return copy.deepcopy(DEFAULT_SPEC)
    if not isinstance(spec, dict):
        with open(spec) as fh:
            spec = json.load(fh)
    merged = copy.deepcopy(DEFAULT_SPEC)
    merged.update(copy.deepcopy(spec))
    return merged


def base_anatomy(spec: dict, registry: RoiRegistry):
    """Label array with one blob per (ROI, side) and the blob centres."""
    names = spec.get("rois") or registry.names()
    for name in names:
        if name not in registry:
            raise SynthSpecError(f"unknown ROI {name!r} in synthetic spec")
    radii = [int(r) for r in spec["radius_vox"]]
    blob = _ellipsoid(radii)
    margin = int(spec["margin_vox"])
    cell = [2 * r + 1 + margin for r in radii]
    n = len(names)
    ncols = math.ceil(math.sqrt(n))
    nrows = math.ceil(n / ncols)
    dims = (2 * cell[0] + margin, ncols * cell[1] + margin, nrows * cell[2] + margin)
    labels = np.zeros(dims, dtype=np.int32)
    centres = {}
    for i, name in enumerate(names):
        spec_roi = registry.lookup(name)
        row, col = divmod(i, ncols)
        cy = margin + col * cell[1] + radii[1]
        cz = margin + row * cell[2] + radii[2]
        for h, side in enumerate((Side.LEFT, Side.RIGHT)):
            cx = margin + h * cell[0] + radii[0]
            label = min(spec_roi.ids(side))
            sl = tuple(slice(c - r, c + r + 1) for c, r in zip((cx, cy, cz), radii))
            labels[sl][blob] = label
            centres[(name, side.value)] = (cx, cy, cz)
    return labels, centres, names


def _roi_mask(labels, registry, name, side):
    return np.isin(labels, sorted(registry.lookup(name).ids(side)))


def _apply(labels, registry, pert, rng) -> dict:
    name, side = pert["roi"], Side(pert.get("side", "left"))
    if name not in registry:
        raise SynthSpecError(f"unknown ROI {name!r} in perturbation")
    mask = _roi_mask(labels, registry, name, side)
    label = min(registry.lookup(name).ids(side))
    applied = {"subject": pert["subject"], "session": pert["session"], "roi": name, "side": side.value}
    if "shift" in pert:
        shift = [int(s) for s in pert["shift"]]
        labels[mask] = 0
        moved = np.zeros_like(mask)
        src = [slice(max(0, -s), mask.shape[a] - max(0, s)) for a, s in enumerate(shift)]
        dst = [slice(max(0, s), mask.shape[a] - max(0, -s)) for a, s in enumerate(shift)]
        moved[tuple(dst)] = mask[tuple(src)]
        labels[moved & (labels == 0)] = label
        applied["shift"] = shift
    if "erode" in pert:
        shells = int(pert["erode"])
        cur = mask.copy()
        for _ in range(shells):
            cur &= ~boundary(cur)
        labels[mask & ~cur] = 0
        applied["erode"] = shells
    if "flip_fraction" in pert:
        frac = float(pert["flip_fraction"])
        edge = np.argwhere(boundary(_roi_mask(labels, registry, name, side)))
        pick = rng.random(len(edge)) < frac
        sel = edge[pick]
        labels[sel[:, 0], sel[:, 1], sel[:, 2]] = 0
        applied["flip_fraction"] = frac
        applied["flipped_voxels"] = int(pick.sum())
    return applied


def _noise(labels, fraction, rng) -> int:
    if fraction <= 0:
        return 0
    edge = np.argwhere(boundary(labels > 0))
    pick = rng.random(len(edge)) < fraction
    sel = edge[pick]
    labels[sel[:, 0], sel[:, 1], sel[:, 2]] = 0
    return int(pick.sum())


def generate_dataset(out_dir, seed: int = 0, spec=None, registry: RoiRegistry | None = None) -> dict:
    """Write a synthetic dataset under ``out_dir`` and return its manifest.

    The same ``seed`` and spec always produce byte-identical files.
    """
    spec = load_spec(spec)
    registry = registry or default_registry()
    out_dir = Path(out_dir)
    rng = np.random.default_rng(seed)
    base, centres, names = base_anatomy(spec, registry)
    spacing = tuple(float(s) for s in spec["spacing"])
    perts = list(spec.get("perturbations") or [])
    for p in perts:
        for key in ("subject", "session", "roi"):
            if key not in p:
                raise SynthSpecError(f"perturbation {p} lacks {key!r}")
        if p["roi"] not in names:
            raise SynthSpecError(f"unknown ROI {p['roi']!r} in perturbation")

    manifest = {"seed": seed, "spec": spec, "dims": list(base.shape), "sessions": [], "perturbations": []}
    out_dir.mkdir(parents=True, exist_ok=True)
    for subj in spec["subjects"]:
        sid = str(subj["id"])
        n_ses = int(subj["sessions"])
        start = dt.date.fromisoformat(subj.get("start_date", "2020-01-01"))
        step = int(subj.get("interval_days", 30))
        scanners = list(subj.get("scanners") or ["scannerA"])
        for k in range(n_ses):
            ses = f"{k + 1:02d}"
            labels = base.copy()
            noise = _noise(labels, float(spec.get("noise_flip_fraction", 0.0)), rng)
            for p in perts:
                if str(p["subject"]) == sid and str(p["session"]) == ses:
                    manifest["perturbations"].append(_apply(labels, registry, p, rng))
            date = start + dt.timedelta(days=step * k)
            scanner = scanners[k] if k < len(scanners) else scanners[-1]
            anat = out_dir / f"sub-{sid}" / f"ses-{ses}" / "anat"
            anat.mkdir(parents=True, exist_ok=True)
            stem = f"sub-{sid}_ses-{ses}_dseg"
            write_label_volume(LabelVolume.from_array(labels, spacing), anat / f"{stem}.nii.gz")
            sidecar = {
                "AcquisitionDate": date.isoformat(),
                "ScannerTag": scanner,
                "SiteTag": scanner,
                "EchoTime": subj.get("echo_time_s", 0.003),
                "RepetitionTime": subj.get("repetition_time_s", 2.3),
            }
            with open(anat / f"{stem}.json", "w") as fh:
                json.dump(sidecar, fh, indent=2, sort_keys=True)
                fh.write("\n")
            manifest["sessions"].append(
                {"subject": sid, "session": ses, "date": date.isoformat(), "scanner": scanner, "noise_flipped": noise}
            )
    with open(out_dir / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest
