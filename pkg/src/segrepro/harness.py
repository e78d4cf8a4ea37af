"""Dataset discovery, session pairing and per-ROI metric evaluation."""

from __future__ import annotations

import csv
import datetime as dt
import enum
import json
import logging
import os
import re
from collections import defaultdict
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from itertools import combinations
from pathlib import Path

import numpy as np
from scipy import ndimage

from ._validation import GridMismatchError, check_tolerance
from .metrics import PairMetrics, pair_metrics
from .resample import AffineTransform, ReferenceGrid, read_affine_transform, resample_labels
from .roi import BinaryMask, RoiRegistry, Side
from .volume_io import NiftiError, read_header, read_label_volume

logger = logging.getLogger(__name__)

JOBS_ENV = "SEGREPRO_JOBS"

_ENTITY = re.compile(r"sub-(?P<sub>[A-Za-z0-9]+)_ses-(?P<ses>[A-Za-z0-9]+)")
_NII = re.compile(r"\.nii(\.gz)?$")


class DatasetError(ValueError):
    pass


class Policy(str, enum.Enum):
    CONSECUTIVE = "consecutive"
    FIRST_REFERENCE = "first_reference"
    ALL_PAIRS = "all_pairs"


class Layout(str, enum.Enum):
    BIDS_LIKE = "bids_like"
    FLAT_PAIRS = "flat_pairs"


class GroupTag(str, enum.Enum):
    WITHIN_SCANNER = "within_scanner"
    CROSS_SCANNER = "cross_scanner"
    UNKNOWN = "unknown"


@dataclass(frozen=True)
class SessionMeta:
    subject_id: str
    session_id: str
    acquisition_date: dt.date | None = None
    site_tag: str | None = None
    scanner_tag: str | None = None
    echo_time_ms: float | None = None
    repetition_time_ms: float | None = None
    voxel_size_mm: tuple[float, float, float] | None = None
    path: Path | None = field(default=None, compare=False)

    @property
    def key(self) -> str:
        return f"sub-{self.subject_id}_ses-{self.session_id}"


@dataclass(frozen=True)
class ComparisonPlan:
    policy: Policy
    pairs: tuple[tuple[SessionMeta, SessionMeta], ...]


@dataclass(frozen=True)
class MetricRecord:
    subject_id: str
    session_a: str
    session_b: str
    roi_name: str
    roi_class: str
    side: str
    metrics: PairMetrics
    group_tag: GroupTag


@dataclass(frozen=True)
class ResampleConfig:
    """Resampling applied to every volume before comparison.

    ``reference`` is ``"first-session"`` (each subject's earliest session
    grid) or ``"atlas"`` (the grid of ``atlas_path``). ``transforms`` maps a
    session key such as ``sub-01_ses-02`` to a transform file; sessions
    without an entry use the identity.
    """

    reference: str = "first-session"
    atlas_path: str | None = None
    transforms: dict = field(default_factory=dict)
    lps_to_ras: bool = False

    def __post_init__(self):
        if self.reference not in ("first-session", "atlas"):
            raise ValueError(f"reference must be 'first-session' or 'atlas', got {self.reference!r}")
        if self.reference == "atlas" and not self.atlas_path:
            raise ValueError("atlas reference needs atlas_path")

    def transform_for(self, meta: SessionMeta) -> AffineTransform:
        path = self.transforms.get(meta.key)
        if path is None:
            return AffineTransform.identity()
        return read_affine_transform(path, lps_to_ras=self.lps_to_ras)

    def as_dict(self) -> dict:
        return {
            "reference": self.reference,
            "atlas_path": self.atlas_path,
            "transforms": dict(sorted(self.transforms.items())),
            "lps_to_ras": self.lps_to_ras,
        }


# ---------------------------------------------------------------- scanning


def _parse_date(value) -> dt.date | None:
    if not value:
        return None
    text = str(value).strip()
    try:
        return dt.datetime.fromisoformat(text.replace("Z", "+00:00")).date()
    except ValueError:
        pass
    try:
        return dt.date.fromisoformat(text[:10])
    except ValueError:
        logger.warning("ignoring unparseable date %r", value)
        return None


def _seconds_to_ms(value) -> float | None:
    if value is None:
        return None
    try:
        return float(value) * 1000.0
    except (TypeError, ValueError):
        return None


def _sidecar_for(path: Path) -> Path:
    return path.with_name(_NII.sub("", path.name) + ".json")


def _read_sidecar(path: Path) -> dict:
    side = _sidecar_for(path)
    if not side.exists():
        return {}
    try:
        with open(side) as fh:
            data = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        logger.warning("%s: unreadable sidecar (%s)", side, exc)
        return {}
    return data if isinstance(data, dict) else {}


def _scanner_tag(meta: dict) -> str | None:
    if meta.get("ScannerTag"):
        return str(meta["ScannerTag"])
    parts = [str(meta[k]) for k in ("Manufacturer", "ManufacturersModelName", "DeviceSerialNumber") if meta.get(k)]
    return "/".join(parts) if parts else None


def _session_dates(subject_dir: Path, subject: str) -> dict[str, dt.date]:
    tsv = subject_dir / f"sub-{subject}_sessions.tsv"
    if not tsv.exists():
        return {}
    out = {}
    with open(tsv, newline="") as fh:
        for row in csv.DictReader(fh, delimiter="\t"):
            ses = (row.get("session_id") or "").removeprefix("ses-")
            date = _parse_date(row.get("acq_time"))
            if ses and date:
                out[ses] = date
    return out


def _voxel_size(path: Path) -> tuple[float, float, float] | None:
    try:
        hdr = read_header(path)
    except (NiftiError, OSError):
        return None
    return tuple(round(abs(float(p)), 6) for p in hdr.pixdim[1:4])


def _make_meta(subject: str, session: str, path: Path, tsv_dates: dict) -> SessionMeta:
    side = _read_sidecar(path)
    date = None
    for key in ("AcquisitionDate", "AcquisitionDateTime", "acq_time"):
        date = _parse_date(side.get(key))
        if date:
            break
    if date is None:
        date = tsv_dates.get(session)
    return SessionMeta(
        subject_id=subject,
        session_id=session,
        acquisition_date=date,
        site_tag=str(side.get("SiteTag") or side.get("InstitutionName") or "") or None,
        scanner_tag=_scanner_tag(side),
        echo_time_ms=_seconds_to_ms(side.get("EchoTime")),
        repetition_time_ms=_seconds_to_ms(side.get("RepetitionTime")),
        voxel_size_mm=_voxel_size(path),
        path=path,
    )


def scan_dataset(root, layout: Layout | str = Layout.BIDS_LIKE) -> list[SessionMeta]:
    """Discover label volumes and their metadata under ``root``.

    ``bids_like`` looks for ``sub-*/ses-*/anat/*_dseg.nii[.gz]`` with
    optional JSON sidecars and ``sub-*_sessions.tsv`` dates. ``flat_pairs``
    takes every ``sub-<s>_ses-<x>*.nii[.gz]`` directly under ``root``.
    Each returned :class:`SessionMeta` carries its volume ``path``.
    """
    root = Path(root)
    layout = Layout(layout)
    if not root.is_dir():
        raise DatasetError(f"{root}: not a directory")
    found: list[SessionMeta] = []
    if layout is Layout.BIDS_LIKE:
        for sub_dir in sorted(root.glob("sub-*")):
            if not sub_dir.is_dir():
                continue
            subject = sub_dir.name.removeprefix("sub-")
            dates = _session_dates(sub_dir, subject)
            for ses_dir in sorted(sub_dir.glob("ses-*")):
                session = ses_dir.name.removeprefix("ses-")
                for path in sorted((ses_dir / "anat").glob("*_dseg.nii*")):
                    if _NII.search(path.name):
                        found.append(_make_meta(subject, session, path, dates))
    else:
        for path in sorted(root.iterdir()):
            m = _ENTITY.search(path.name)
            if m and _NII.search(path.name) and path.is_file():
                found.append(_make_meta(m["sub"], m["ses"], path, {}))
    if not found:
        raise DatasetError(f"{root}: no sessions found")
    seen: dict[tuple[str, str], Path] = {}
    for meta in found:
        k = (meta.subject_id, meta.session_id)
        if k in seen:
            raise DatasetError(f"duplicate session sub-{k[0]} ses-{k[1]}: {seen[k]} and {meta.path}")
        seen[k] = meta.path
    return found


# ---------------------------------------------------------------- planning


def _order_key(meta: SessionMeta):
    return (meta.acquisition_date is None, meta.acquisition_date or dt.date.min, meta.session_id)


def sessions_by_subject(sessions) -> dict[str, list[SessionMeta]]:
    """Sessions grouped per subject, each list in acquisition order."""
    groups: dict[str, list[SessionMeta]] = defaultdict(list)
    for s in sessions:
        groups[s.subject_id].append(s)
    return {sub: sorted(groups[sub], key=_order_key) for sub in sorted(groups)}


def build_plan(sessions, policy: Policy | str = Policy.CONSECUTIVE) -> ComparisonPlan:
    """Pair sessions within each subject.

    Sessions are ordered by acquisition date; undated sessions come after
    dated ones, ordered by ``session_id``.
    """
    policy = Policy(policy)
    pairs = []
    for subject, ordered in sessions_by_subject(sessions).items():
        if len(ordered) < 2:
            continue
        if policy is Policy.CONSECUTIVE:
            pairs.extend(zip(ordered[:-1], ordered[1:]))
        elif policy is Policy.FIRST_REFERENCE:
            pairs.extend((ordered[0], s) for s in ordered[1:])
        else:
            pairs.extend(combinations(ordered, 2))
    if not pairs:
        raise DatasetError("no subject has at least 2 sessions")
    return ComparisonPlan(policy, tuple(pairs))


def group_tag(a: SessionMeta, b: SessionMeta) -> GroupTag:
    if not a.scanner_tag or not b.scanner_tag:
        return GroupTag.UNKNOWN
    return GroupTag.WITHIN_SCANNER if a.scanner_tag == b.scanner_tag else GroupTag.CROSS_SCANNER


# ---------------------------------------------------------------- evaluation


def resolve_jobs(jobs: int | None) -> int:
    """Worker count: explicit value, else the env override, else all cores."""
    if jobs is None:
        env = os.environ.get(JOBS_ENV)
        jobs = int(env) if env else (os.cpu_count() or 1)
    return max(1, int(jobs))


def _reference_grids(plan: ComparisonPlan, config: ResampleConfig | None) -> dict[str, ReferenceGrid]:
    if config is None:
        return {}
    if config.reference == "atlas":
        atlas = ReferenceGrid.from_volume(read_label_volume(config.atlas_path))
        return {s.subject_id: atlas for pair in plan.pairs for s in pair}
    firsts = {}
    for pair in plan.pairs:
        for s in pair:
            cur = firsts.get(s.subject_id)
            if cur is None or _order_key(s) < _order_key(cur):
                firsts[s.subject_id] = s
    return {sub: ReferenceGrid.from_volume(read_label_volume(meta.path)) for sub, meta in firsts.items()}


def load_session(meta: SessionMeta, config: ResampleConfig | None = None, reference: ReferenceGrid | None = None):
    volume = read_label_volume(meta.path)
    if config is None:
        return volume
    return resample_labels(volume, config.transform_for(meta), reference)


def _label_boxes(labels: np.ndarray) -> dict[int, tuple[slice, ...]]:
    boxes = ndimage.find_objects(labels)
    return {i + 1: b for i, b in enumerate(boxes) if b is not None}


def _union_box(boxes) -> tuple[slice, ...] | None:
    boxes = [b for b in boxes if b is not None]
    if not boxes:
        return None
    return tuple(
        slice(min(b[ax].start for b in boxes), max(b[ax].stop for b in boxes)) for ax in range(3)
    )


def compare_volumes(vol_a, vol_b, registry: RoiRegistry, sides, tolerance_mm: float):
    """``[(spec, side, PairMetrics), ...]`` in registry x side order.

    Each ROI is evaluated on the bounding box of its labels in either
    volume, which leaves every metric unchanged.
    """
    if not vol_a.same_grid(vol_b):
        raise GridMismatchError(f"grid mismatch: dims {vol_a.dims} vs {vol_b.dims} or differing affines")
    boxes_a, boxes_b = _label_boxes(vol_a.labels), _label_boxes(vol_b.labels)
    spacing = vol_a.spacing
    out = []
    for spec in registry:
        for side in sides:
            ids = sorted(spec.ids(side))
            box = _union_box([boxes_a.get(i) for i in ids] + [boxes_b.get(i) for i in ids])
            if box is None:
                box = (slice(0, 1),) * 3
            crop_a, crop_b = vol_a.labels[box], vol_b.labels[box]
            mask_a = BinaryMask(np.isin(crop_a, ids), spacing)
            mask_b = BinaryMask(np.isin(crop_b, ids), spacing)
            out.append((spec, Side(side), pair_metrics(mask_a, mask_b, tolerance_mm)))
    return out


def _evaluate_pair(task):
    meta_a, meta_b, registry, sides, tol, config, reference = task
    try:
        vol_a = load_session(meta_a, config, reference)
        vol_b = load_session(meta_b, config, reference)
        results = compare_volumes(vol_a, vol_b, registry, sides, tol)
    except GridMismatchError as exc:
        raise GridMismatchError(f"{meta_a.path} vs {meta_b.path}: {exc}") from None
    tag = group_tag(meta_a, meta_b)
    return [
        MetricRecord(
            subject_id=meta_a.subject_id,
            session_a=meta_a.session_id,
            session_b=meta_b.session_id,
            roi_name=spec.name,
            roi_class=spec.roi_class.value,
            side=side.value,
            metrics=metrics,
            group_tag=tag,
        )
        for spec, side, metrics in results
    ]


def evaluate_plan(
    plan: ComparisonPlan,
    registry: RoiRegistry,
    tolerance_mm: float = 1.0,
    resample_config: ResampleConfig | None = None,
    sides=(Side.LEFT, Side.RIGHT),
    jobs: int | None = 1,
) -> list[MetricRecord]:
    """One :class:`MetricRecord` per (pair, ROI, side), in that nesting order.

    Pairs run on ``jobs`` worker processes; results are gathered in plan
    order so the output does not depend on scheduling.
    """
    tol = check_tolerance(tolerance_mm)
    sides = tuple(Side(s) for s in sides)
    refs = _reference_grids(plan, resample_config)
    tasks = [
        (a, b, registry, sides, tol, resample_config, refs.get(a.subject_id))
        for a, b in plan.pairs
    ]
    jobs = min(resolve_jobs(jobs), len(tasks))
    if jobs <= 1:
        chunks = [_evaluate_pair(t) for t in tasks]
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            chunks = list(pool.map(_evaluate_pair, tasks))
    return [rec for chunk in chunks for rec in chunk]


def resampling_volume_deltas(sessions, registry: RoiRegistry, config: ResampleConfig, sides=(Side.LEFT, Side.RIGHT)):
    """Per session/ROI volumes before and after resampling.

    Nearest-neighbour resampling shifts volumes; a large delta usually means
    a transform given in the wrong direction.
    """
    sessions = list(sessions)
    plan = ComparisonPlan(Policy.ALL_PAIRS, tuple((s, s) for s in sessions))
    refs = _reference_grids(plan, config)
    rows = []
    for meta in sessions:
        native = read_label_volume(meta.path)
        moved = resample_labels(native, config.transform_for(meta), refs[meta.subject_id])
        vox_native = native.spacing[0] * native.spacing[1] * native.spacing[2] / 1000.0
        vox_moved = moved.spacing[0] * moved.spacing[1] * moved.spacing[2] / 1000.0
        for spec in registry:
            for side in sides:
                ids = sorted(spec.ids(side))
                v0 = int(np.isin(native.labels, ids).sum()) * vox_native
                v1 = int(np.isin(moved.labels, ids).sum()) * vox_moved
                rows.append(
                    {
                        "subject_id": meta.subject_id,
                        "session_id": meta.session_id,
                        "roi": spec.name,
                        "side": Side(side).value,
                        "vol_native_cm3": v0,
                        "vol_resampled_cm3": v1,
                        "delta_percent": (100.0 * (v1 - v0) / v0) if v0 > 0 else None,
                    }
                )
    return rows


# ---------------------------------------------------------------- acquisition summary


@dataclass(frozen=True)
class ParameterSummary:
    minimum: float | None
    maximum: float | None
    n_unique: int | None

    @property
    def absent(self) -> bool:
        return self.n_unique is None

    def as_dict(self) -> dict:
        return {"min": self.minimum, "max": self.maximum, "n_unique": self.n_unique}


@dataclass(frozen=True)
class AcquisitionSummary:
    parameters: dict[str, ParameterSummary]
    gaps_days: tuple[int, ...]

    def as_dict(self) -> dict:
        return {
            "parameters": {k: v.as_dict() for k, v in self.parameters.items()},
            "gaps_days": list(self.gaps_days),
        }


def _summ(values) -> ParameterSummary:
    vals = [v for v in values if v is not None]
    if not vals:
        return ParameterSummary(None, None, None)
    return ParameterSummary(min(vals), max(vals), len(set(vals)))


def summarize_acquisition(sessions) -> AcquisitionSummary:
    """Min / max / number of unique values per acquisition parameter.

    Dates are summarised as the gaps in days between consecutive dated
    sessions of each subject. Missing metadata stays absent (``None``).
    """
    sessions = list(sessions)
    gaps = []
    for ordered in sessions_by_subject(sessions).values():
        dates = [s.acquisition_date for s in ordered if s.acquisition_date is not None]
        gaps.extend((b - a).days for a, b in zip(dates[:-1], dates[1:]))
    vox = [s.voxel_size_mm for s in sessions]
    params = {
        "test_retest_days": _summ(gaps),
        "echo_time_ms": _summ(s.echo_time_ms for s in sessions),
        "repetition_time_ms": _summ(s.repetition_time_ms for s in sessions),
        "voxel_size_x_mm": _summ(v[0] if v else None for v in vox),
        "voxel_size_y_mm": _summ(v[1] if v else None for v in vox),
        "voxel_size_z_mm": _summ(v[2] if v else None for v in vox),
    }
    return AcquisitionSummary(params, tuple(gaps))
