"""Run configuration and the batch report files.

Four files come out of a batch run: ``records.csv``, ``summary.json``,
``trend.csv`` and ``filter_report.json``. Floats are written with six
significant digits, and the summary is computed from those rounded values,
so ``summary.json`` can be rebuilt exactly from ``records.csv``.
"""

from __future__ import annotations

import csv
import io
import json
import os
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path

from .harness import (
    DatasetError,
    Layout,
    Policy,
    ResampleConfig,
    build_plan,
    evaluate_plan,
    resampling_volume_deltas,
    scan_dataset,
    sessions_by_subject,
    summarize_acquisition,
)
from .roi import Side, default_registry, load_registry
from .stats import FilterRule, QualityFilter, absolute_percentage_errors, describe, fit_trend

RECORD_COLUMNS = (
    "subject_id",
    "session_a",
    "session_b",
    "roi",
    "roi_class",
    "side",
    "group_tag",
    "dice",
    "surface_dice",
    "hd95_mm",
    "vol_a_cm3",
    "vol_b_cm3",
    "vol_diff_cm3",
    "ape_percent",
    "tolerance_mm",
    "undefined_reason",
)
TREND_COLUMNS = (
    "subject_id",
    "roi",
    "side",
    "session_id",
    "date",
    "years",
    "volume_cm3",
    "fitted_cm3",
    "ci_lower_cm3",
    "ci_upper_cm3",
    "slope_cm3_per_year",
    "intercept_cm3",
    "r_squared",
    "n",
)
OUTPUT_FILES = ("records.csv", "summary.json", "trend.csv", "filter_report.json")
_STAT_FIELDS = ("dice", "surface_dice", "hd95_mm", "abs_vol_diff_cm3", "ape_percent")

DEFAULT_FILTER_RULES = (
    FilterRule("surface_dice", 0.92, "subcortical"),
    FilterRule("surface_dice", 0.90, "subcortical"),
    FilterRule("dice", 0.80, "subcortical"),
)


def sig6(value):
    """Round to 6 significant digits; ``None`` passes through."""
    if value is None:
        return None
    return float(f"{float(value):.6g}")


def fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return f"{value:.6g}"
    return str(value)


@dataclass
class RunConfig:
    dataset_root: str
    output_dir: str
    layout: str = Layout.BIDS_LIKE.value
    policy: str = Policy.CONSECUTIVE.value
    registry_path: str | None = None
    tolerance_mm: float = 1.0
    filter_rules: list = field(default_factory=lambda: list(DEFAULT_FILTER_RULES))
    resample: ResampleConfig | None = None
    sides: list = field(default_factory=lambda: [Side.LEFT.value, Side.RIGHT.value])
    jobs: int | None = None
    seed: int = 0
    trend_band: str = "mean"
    sessions: list | None = None

    def __post_init__(self):
        Layout(self.layout)
        Policy(self.policy)
        if not float(self.tolerance_mm) > 0:
            raise ValueError(f"tolerance_mm must be positive, got {self.tolerance_mm}")
        self.tolerance_mm = float(self.tolerance_mm)
        self.filter_rules = [r if isinstance(r, FilterRule) else FilterRule(**r) for r in self.filter_rules]
        if isinstance(self.resample, dict):
            self.resample = ResampleConfig(**self.resample)
        self.sides = [Side(s).value for s in self.sides]
        if self.trend_band not in ("mean", "observation"):
            raise ValueError(f"trend_band must be 'mean' or 'observation', got {self.trend_band!r}")

    def to_dict(self) -> dict:
        return {
            "dataset_root": self.dataset_root,
            "output_dir": self.output_dir,
            "layout": self.layout,
            "policy": self.policy,
            "registry_path": self.registry_path,
            "tolerance_mm": self.tolerance_mm,
            "filter_rules": [r.as_dict() for r in self.filter_rules],
            "resample": self.resample.as_dict() if self.resample else None,
            "sides": list(self.sides),
            "jobs": self.jobs,
            "seed": self.seed,
            "trend_band": self.trend_band,
            "sessions": list(self.sessions) if self.sessions is not None else None,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def load(cls, path) -> "RunConfig":
        """Load a JSON config; relative paths resolve against the file's directory."""
        path = Path(path)
        with open(path) as fh:
            data = json.load(fh)
        cfg = cls.from_dict(data)
        base = path.parent
        cfg.dataset_root = str(_resolve(base, cfg.dataset_root))
        cfg.output_dir = str(_resolve(base, cfg.output_dir))
        if cfg.registry_path:
            cfg.registry_path = str(_resolve(base, cfg.registry_path))
        if cfg.resample:
            r = cfg.resample
            cfg.resample = ResampleConfig(
                reference=r.reference,
                atlas_path=str(_resolve(base, r.atlas_path)) if r.atlas_path else None,
                transforms={k: str(_resolve(base, v)) for k, v in r.transforms.items()},
                lps_to_ras=r.lps_to_ras,
            )
        return cfg

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)
            fh.write("\n")


def _resolve(base: Path, value: str) -> Path:
    p = Path(value)
    return p if p.is_absolute() else base / p


# ---------------------------------------------------------------- rows


def record_row(rec) -> dict:
    m = rec.metrics
    va, vb = m.volume_a_cm3, m.volume_b_cm3
    ape = 100.0 * abs(vb - va) / va if va > 0 else None
    return {
        "subject_id": rec.subject_id,
        "session_a": rec.session_a,
        "session_b": rec.session_b,
        "roi": rec.roi_name,
        "roi_class": rec.roi_class,
        "side": rec.side,
        "group_tag": rec.group_tag.value if hasattr(rec.group_tag, "value") else rec.group_tag,
        "dice": sig6(m.dice),
        "surface_dice": sig6(m.surface_dice),
        "hd95_mm": sig6(m.hd95),
        "vol_a_cm3": sig6(va),
        "vol_b_cm3": sig6(vb),
        "vol_diff_cm3": sig6(vb - va),
        "ape_percent": sig6(ape),
        "tolerance_mm": sig6(m.tolerance_mm),
        "undefined_reason": m.undefined_reason,
    }


_FLOAT_COLUMNS = {"dice", "surface_dice", "hd95_mm", "vol_a_cm3", "vol_b_cm3", "vol_diff_cm3", "ape_percent", "tolerance_mm"}


def read_records_csv(path) -> list[dict]:
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        for raw in csv.DictReader(fh):
            row = {}
            for k, v in raw.items():
                if k in _FLOAT_COLUMNS:
                    row[k] = float(v) if v != "" else None
                else:
                    row[k] = v if v != "" else None
            rows.append(row)
    return rows


def _csv_text(columns, rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([fmt(row.get(c)) for c in columns])
    return buf.getvalue()


# ---------------------------------------------------------------- summary


def summarize_rows(rows) -> list[dict]:
    """Per (ROI, side, group) statistics of every metric column."""
    groups: dict[tuple, list[dict]] = defaultdict(list)
    for row in rows:
        groups[(row["roi"], row["side"], row["group_tag"])].append(row)
        groups[(row["roi"], row["side"], "all")].append(row)
    out = []
    for (roi, side, tag), members in sorted(groups.items()):
        entry = {"roi": roi, "side": side, "group_tag": tag, "n_records": len(members)}
        for name in _STAT_FIELDS:
            if name == "abs_vol_diff_cm3":
                values = [abs(r["vol_diff_cm3"]) for r in members if r["vol_diff_cm3"] is not None]
            else:
                values = [r[name] for r in members]
            entry[name] = {k: sig6(v) if isinstance(v, float) else v for k, v in describe(values).as_dict().items()}
        out.append(entry)
    return out


def session_volumes(records, sessions) -> dict[tuple, dict[str, float]]:
    """``{(subject, roi, side): {session_id: volume_cm3}}`` as seen in the records."""
    out: dict[tuple, dict[str, float]] = defaultdict(dict)
    for rec in records:
        key = (rec.subject_id, rec.roi_name, rec.side)
        out[key].setdefault(rec.session_a, rec.metrics.volume_a_cm3)
        out[key].setdefault(rec.session_b, rec.metrics.volume_b_cm3)
    return out


def _volume_by_scanner(vols, sessions) -> list[dict]:
    meta = {(s.subject_id, s.session_id): s for s in sessions}
    out = []
    for (subject, roi, side), per_session in sorted(vols.items()):
        by_tag: dict[str, list[float]] = defaultdict(list)
        for ses, v in sorted(per_session.items()):
            tag = meta[(subject, ses)].scanner_tag or "unknown"
            by_tag[tag].append(v)
            by_tag["all"].append(v)
        for tag, values in sorted(by_tag.items()):
            stats = describe(values).as_dict()
            out.append(
                {
                    "subject_id": subject,
                    "roi": roi,
                    "side": side,
                    "scanner_tag": tag,
                    **{k: sig6(v) if isinstance(v, float) else v for k, v in stats.items()},
                }
            )
    return out


def trend_rows(records, sessions, band: str = "mean") -> tuple[list[dict], list[dict]]:
    """Rows for ``trend.csv`` and a list of skipped (subject, ROI, side) keys."""
    vols = session_volumes(records, sessions)
    ordered = sessions_by_subject(sessions)
    rows, skipped = [], []
    for (subject, roi, side), per_session in sorted(vols.items()):
        metas = [m for m in ordered.get(subject, []) if m.session_id in per_session]
        points = [(m, per_session[m.session_id]) for m in metas if m.acquisition_date and per_session[m.session_id] > 0]
        dates = [m.acquisition_date for m, _ in points]
        if len(points) < 3 or len(set(dates)) < 2:
            skipped.append({"subject_id": subject, "roi": roi, "side": side, "reason": "fewer than 3 dated sessions"})
            continue
        fit = fit_trend(dates, [v for _, v in points], roi_name=roi, side=side, band=band)
        for i, (m, v) in enumerate(points):
            rows.append(
                {
                    "subject_id": subject,
                    "roi": roi,
                    "side": side,
                    "session_id": m.session_id,
                    "date": m.acquisition_date.isoformat(),
                    "years": sig6(fit.times_years[i]),
                    "volume_cm3": sig6(v),
                    "fitted_cm3": sig6(fit.fitted[i]),
                    "ci_lower_cm3": sig6(fit.ci_lower[i]),
                    "ci_upper_cm3": sig6(fit.ci_upper[i]),
                    "slope_cm3_per_year": sig6(fit.slope),
                    "intercept_cm3": sig6(fit.intercept),
                    "r_squared": sig6(fit.r_squared),
                    "n": fit.n,
                }
            )
    return rows, skipped


def filter_reports(records, rules) -> list[dict]:
    out = []
    for rule in rules:
        qf = QualityFilter(rule.metric.value, rule.threshold, rule.scope.value).fit(records)
        keep = qf.keep_mask(records)
        entry = qf.report_.as_dict()
        for k in ("percent_filtered", "mape_p75", "mape_p95"):
            entry[k] = sig6(entry[k])
        entry["removed"] = [
            {
                "subject_id": r.subject_id,
                "session_a": r.session_a,
                "session_b": r.session_b,
                "roi": r.roi_name,
                "side": r.side,
            }
            for r, k in zip(records, keep)
            if not k
        ]
        out.append(entry)
    return out


def build_outputs(records, sessions, config: RunConfig, plan, registry) -> dict[str, str]:
    """Render all four report files as text, keyed by file name."""
    rows = [record_row(r) for r in records]
    trends, skipped = trend_rows(records, sessions, band=config.trend_band)
    defined = [r for r in records if r.metrics.volume_a_cm3 > 0]
    summary = {
        "n_pairs": len(plan.pairs),
        "n_records": len(rows),
        "policy": plan.policy.value,
        "tolerance_mm": config.tolerance_mm,
        "registry": [e.name for e in registry],
        "mape_percent": sig6(float(absolute_percentage_errors(defined).mean())) if defined else None,
        "groups": summarize_rows(rows),
        "volume_by_scanner": _volume_by_scanner(session_volumes(records, sessions), sessions),
        "acquisition": _sig_tree(summarize_acquisition(sessions).as_dict()),
        "trend_skipped": skipped,
    }
    if config.resample is not None:
        deltas = resampling_volume_deltas(sessions, registry, config.resample, config.sides)
        summary["resampling"] = [{k: sig6(v) if isinstance(v, float) else v for k, v in d.items()} for d in deltas]
    filt = {"rules": filter_reports(records, config.filter_rules)}
    return {
        "records.csv": _csv_text(RECORD_COLUMNS, rows),
        "summary.json": json.dumps(summary, indent=2, sort_keys=True) + "\n",
        "trend.csv": _csv_text(TREND_COLUMNS, trends),
        "filter_report.json": json.dumps(filt, indent=2, sort_keys=True) + "\n",
    }


def _sig_tree(obj):
    if isinstance(obj, float):
        return sig6(obj)
    if isinstance(obj, dict):
        return {k: _sig_tree(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_sig_tree(v) for v in obj]
    return obj


def write_outputs(texts: dict[str, str], out_dir) -> None:
    """Write every file to a temporary name, then rename all into place."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    tmps = []
    try:
        for name, text in texts.items():
            tmp = out_dir / f".{name}.tmp{os.getpid()}"
            with open(tmp, "w", encoding="utf-8", newline="") as fh:
                fh.write(text)
            tmps.append((tmp, out_dir / name))
    except BaseException:
        for tmp, _ in tmps:
            tmp.unlink(missing_ok=True)
        raise
    for tmp, final in tmps:
        os.replace(tmp, final)


def select_sessions(sessions, keys):
    """Keep only the sessions named in ``keys`` (``sub-<s>_ses-<x>``); ``None`` keeps all."""
    if keys is None:
        return sessions
    wanted = set(keys)
    missing = wanted - {s.key for s in sessions}
    if missing:
        raise DatasetError(f"sessions not found in dataset: {sorted(missing)}")
    return [s for s in sessions if s.key in wanted]


def run_batch(config: RunConfig, jobs: int | None = None):
    """Scan, pair, evaluate and write the report files; returns the records."""
    registry = load_registry(config.registry_path) if config.registry_path else default_registry()
    sessions = select_sessions(scan_dataset(config.dataset_root, config.layout), config.sessions)
    plan = build_plan(sessions, config.policy)
    records = evaluate_plan(
        plan,
        registry,
        config.tolerance_mm,
        resample_config=config.resample,
        sides=config.sides,
        jobs=jobs if jobs is not None else config.jobs,
    )
    expected = len(plan.pairs) * len(registry) * len(config.sides)
    if len(records) != expected:
        raise AssertionError(f"record count {len(records)} != {expected}")
    texts = build_outputs(records, sessions, config, plan, registry)
    write_outputs(texts, config.output_dir)
    return records


def check_output_consistency(out_dir) -> list[str]:
    """Problems found when rebuilding ``summary.json`` groups from ``records.csv``."""
    out_dir = Path(out_dir)
    rows = read_records_csv(out_dir / "records.csv")
    with open(out_dir / "summary.json") as fh:
        summary = json.load(fh)
    problems = []
    if summary.get("n_records") != len(rows):
        problems.append(f"n_records {summary.get('n_records')} != {len(rows)} rows in records.csv")
    rebuilt = json.loads(json.dumps(summarize_rows(rows)))
    if rebuilt != summary.get("groups"):
        problems.append("per-group statistics in summary.json differ from a recomputation over records.csv")
    return problems
