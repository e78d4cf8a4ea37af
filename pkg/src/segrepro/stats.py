"""Quality filtering, volume variability statistics and longitudinal trends.

Records are duck-typed: anything with ``metrics`` (a
:class:`~segrepro.metrics.PairMetrics`) and ``roi_class`` works.
"""

from __future__ import annotations

import datetime as _dt
import enum
from collections.abc import Mapping, Sequence
from dataclasses import dataclass

import numpy as np
from scipy import stats as _sps
from sklearn.base import BaseEstimator, RegressorMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .roi import RoiClass

DAYS_PER_YEAR = 365.25


class FilterMetric(str, enum.Enum):
    DICE = "dice"
    SURFACE_DICE = "surface_dice"


class FilterScope(str, enum.Enum):
    CORTICAL = "cortical"
    SUBCORTICAL = "subcortical"
    ALL = "all"


@dataclass(frozen=True)
class FilterRule:
    metric: FilterMetric
    threshold: float
    scope: FilterScope = FilterScope.ALL

    def __post_init__(self):
        object.__setattr__(self, "metric", FilterMetric(self.metric))
        object.__setattr__(self, "scope", FilterScope(self.scope))
        thr = float(self.threshold)
        if not 0.0 <= thr < 1.0:
            raise ValueError(f"threshold must lie in [0, 1), got {self.threshold}")
        object.__setattr__(self, "threshold", thr)

    def in_scope(self, record) -> bool:
        if self.scope is FilterScope.ALL:
            return True
        return RoiClass(record.roi_class).value == self.scope.value

    def passes(self, record) -> bool:
        value = getattr(record.metrics, self.metric.value)
        return value is not None and value >= self.threshold

    def as_dict(self) -> dict:
        return {"metric": self.metric.value, "threshold": self.threshold, "scope": self.scope.value}


@dataclass(frozen=True)
class FilterReport:
    rule: FilterRule
    structures_total: int
    structures_removed: int
    undefined_removed: int
    percent_filtered: float
    mape_p75: float | None
    mape_p95: float | None

    def as_dict(self) -> dict:
        return {
            "rule": self.rule.as_dict(),
            "structures_total": self.structures_total,
            "structures_removed": self.structures_removed,
            "undefined_removed": self.undefined_removed,
            "percent_filtered": self.percent_filtered,
            "mape_p75": self.mape_p75,
            "mape_p95": self.mape_p95,
        }


def mape(predicted, reference) -> float:
    """Mean absolute percentage error, in percent."""
    pred = np.asarray(predicted, dtype=float).ravel()
    ref = np.asarray(reference, dtype=float).ravel()
    if pred.shape != ref.shape or pred.size == 0:
        raise ValueError("mape needs two non-empty sequences of equal length")
    if np.any(ref == 0):
        raise ZeroDivisionError("reference volume of zero")
    return float(100.0 * np.mean(np.abs((pred - ref) / ref)))


def absolute_percentage_errors(records) -> np.ndarray:
    """Per-record ``100 |V_b - V_a| / V_a`` with session A as reference."""
    ref = np.array([r.metrics.volume_a_cm3 for r in records], dtype=float)
    pred = np.array([r.metrics.volume_b_cm3 for r in records], dtype=float)
    if np.any(ref == 0):
        raise ZeroDivisionError("reference volume of zero")
    return 100.0 * np.abs((pred - ref) / ref)


def volume_mape(records) -> float:
    records = list(records)
    if not records:
        raise ValueError("volume_mape of no records")
    return float(np.mean(absolute_percentage_errors(records)))


class QualityFilter(BaseEstimator, TransformerMixin):
    """Drop metric records whose chosen agreement score is below a threshold.

    A record whose metric is undefined (an empty mask on either side) is
    removed and counted separately. Records outside ``scope`` pass through
    untouched and do not enter the report.
    """

    def __init__(self, metric="surface_dice", threshold=0.92, scope="all"):
        self.metric = metric
        self.threshold = threshold
        self.scope = scope

    def _rule(self) -> FilterRule:
        return FilterRule(self.metric, self.threshold, self.scope)

    def fit(self, X, y=None):
        records = list(X)
        if not records:
            raise ValueError("no records to filter")
        rule = self._rule()
        scoped = [r for r in records if rule.in_scope(r)]
        removed = [r for r in scoped if not rule.passes(r)]
        kept = [r for r in scoped if rule.passes(r)]
        undefined = sum(1 for r in removed if getattr(r.metrics, rule.metric.value) is None)
        if kept:
            ape = absolute_percentage_errors(kept)
            p75, p95 = (float(v) for v in np.percentile(ape, [75.0, 95.0]))
        else:
            p75 = p95 = None
        total = len(scoped)
        self.rule_ = rule
        self.report_ = FilterReport(
            rule=rule,
            structures_total=total,
            structures_removed=len(removed),
            undefined_removed=undefined,
            percent_filtered=100.0 * len(removed) / total if total else 0.0,
            mape_p75=p75,
            mape_p95=p95,
        )
        return self

    def keep_mask(self, X) -> np.ndarray:
        check_is_fitted(self, "rule_")
        rule = self.rule_
        return np.array([not rule.in_scope(r) or rule.passes(r) for r in X], dtype=bool)

    def transform(self, X):
        records = list(X)
        keep = self.keep_mask(records)
        return [r for r, k in zip(records, keep) if k]


def apply_filter(records, rule: FilterRule):
    """Split ``records`` by ``rule``; returns ``(retained, removed, report)``."""
    records = list(records)
    filt = QualityFilter(rule.metric.value, rule.threshold, rule.scope.value).fit(records)
    keep = filt.keep_mask(records)
    retained = [r for r, k in zip(records, keep) if k]
    removed = [r for r, k in zip(records, keep) if not k]
    return retained, removed, filt.report_


@dataclass(frozen=True)
class GroupStats:
    n: int
    mean: float | None
    sd: float | None
    minimum: float | None
    maximum: float | None
    sufficient: bool

    def as_dict(self) -> dict:
        return {
            "n": self.n,
            "mean": self.mean,
            "sd": self.sd,
            "min": self.minimum,
            "max": self.maximum,
            "sufficient": self.sufficient,
        }


def describe(values) -> GroupStats:
    """Mean, sample SD (n-1), and range; fewer than two values is flagged insufficient."""
    x = np.asarray([v for v in values if v is not None], dtype=float)
    n = int(x.size)
    if n == 0:
        return GroupStats(0, None, None, None, None, False)
    if n < 2:
        return GroupStats(n, float(x[0]), None, float(x[0]), float(x[0]), False)
    return GroupStats(n, float(x.mean()), float(x.std(ddof=1)), float(x.min()), float(x.max()), True)


def group_variability(groups: Mapping[str, Sequence[float]]) -> dict[str, GroupStats]:
    return {str(key): describe(values) for key, values in groups.items()}


@dataclass(frozen=True)
class TrendFit:
    roi_name: str
    side: str
    slope: float  # cm3 per year
    intercept: float  # cm3 at the first scan
    r_squared: float
    slope_stderr: float
    n: int
    times_years: tuple[float, ...]
    fitted: tuple[float, ...]
    ci_lower: tuple[float, ...]
    ci_upper: tuple[float, ...]
    level: float = 0.95
    band: str = "mean"


class LongitudinalTrend(BaseEstimator, RegressorMixin):
    """Ordinary least squares line of volume against time in years.

    Parameters
    ----------
    level : float
        Coverage of the band returned by :meth:`confidence_band`.
    band : {"mean", "observation"}
        ``"mean"`` bounds the fitted mean; ``"observation"`` adds the
        residual variance to give a prediction band for new scans.
    """

    def __init__(self, level=0.95, band="mean"):
        self.level = level
        self.band = band

    def fit(self, X, y):
        X, y = check_X_y(np.asarray(X, dtype=float).reshape(-1, 1), y, y_numeric=True)
        x = X[:, 0]
        n = x.size
        if n < 3:
            raise ValueError(f"trend fit needs at least 3 time points, got {n}")
        x_mean = x.mean()
        sxx = float(np.sum((x - x_mean) ** 2))
        if sxx == 0.0:
            raise ValueError("trend fit needs at least 2 distinct time points")
        y_mean = y.mean()
        slope = float(np.sum((x - x_mean) * (y - y_mean)) / sxx)
        intercept = float(y_mean - slope * x_mean)
        resid = y - (intercept + slope * x)
        ss_res = float(np.sum(resid**2))
        ss_tot = float(np.sum((y - y_mean) ** 2))
        self.coef_ = np.array([slope])
        self.intercept_ = intercept
        self.r_squared_ = 0.0 if ss_tot == 0.0 else float(min(1.0, max(0.0, 1.0 - ss_res / ss_tot)))
        self.residual_std_ = float(np.sqrt(ss_res / (n - 2)))
        self.slope_stderr_ = self.residual_std_ / np.sqrt(sxx)
        self.x_mean_ = float(x_mean)
        self.sxx_ = sxx
        self.n_samples_ = n
        return self

    def predict(self, X):
        check_is_fitted(self, "coef_")
        x = check_array(np.asarray(X, dtype=float).reshape(-1, 1))[:, 0]
        return self.intercept_ + self.coef_[0] * x

    def confidence_band(self, X):
        """Lower and upper band bounds at ``X`` using the t quantile with n-2 dof."""
        if self.band not in ("mean", "observation"):
            raise ValueError(f"band must be 'mean' or 'observation', got {self.band!r}")
        fitted = self.predict(X)
        x = np.asarray(X, dtype=float).ravel()
        var = 1.0 / self.n_samples_ + (x - self.x_mean_) ** 2 / self.sxx_
        if self.band == "observation":
            var = var + 1.0
        tq = _sps.t.ppf(0.5 + self.level / 2.0, self.n_samples_ - 2)
        half = tq * self.residual_std_ * np.sqrt(var)
        return fitted - half, fitted + half


def years_since_first(times) -> np.ndarray:
    """Dates (or numeric years) as years elapsed since the earliest one."""
    times = list(times)
    if times and isinstance(times[0], _dt.date):
        first = min(times)
        return np.array([(t - first).days / DAYS_PER_YEAR for t in times], dtype=float)
    t = np.asarray(times, dtype=float)
    return t - t.min() if t.size else t


def fit_trend(times, volumes, roi_name: str = "", side: str = "", level: float = 0.95, band: str = "mean") -> TrendFit:
    """Fit volume (cm3) against years since the first scan."""
    x = years_since_first(times)
    model = LongitudinalTrend(level=level, band=band).fit(x, volumes)
    lo, hi = model.confidence_band(x)
    return TrendFit(
        roi_name=roi_name,
        side=side,
        slope=float(model.coef_[0]),
        intercept=model.intercept_,
        r_squared=model.r_squared_,
        slope_stderr=float(model.slope_stderr_),
        n=model.n_samples_,
        times_years=tuple(float(v) for v in x),
        fitted=tuple(float(v) for v in model.predict(x)),
        ci_lower=tuple(float(v) for v in lo),
        ci_upper=tuple(float(v) for v in hi),
        level=level,
        band=band,
    )
