"""Reproducibility metrics for brain segmentation label volumes."""

from .harness import (
    ComparisonPlan,
    MetricRecord,
    ResampleConfig,
    SessionMeta,
    build_plan,
    evaluate_plan,
    scan_dataset,
    summarize_acquisition,
)
from .metrics import (
    PairMetrics,
    UndefinedMetricError,
    dice,
    distance_field,
    extract_surface,
    hd95,
    pair_metrics,
    surface_dice,
)
from .resample import AffineTransform, LabelResampler, ReferenceGrid, read_affine_transform, resample_labels
from .roi import BinaryMask, RoiRegistry, RoiSpec, Side, default_registry, extract_mask, mask_volume_cm3
from .stats import (
    FilterRule,
    LongitudinalTrend,
    QualityFilter,
    apply_filter,
    fit_trend,
    group_variability,
    volume_mape,
)
from .volume_io import LabelVolume, NiftiError, read_label_volume, write_label_volume

__version__ = "0.1.0"

__all__ = [
    "AffineTransform",
    "apply_filter",
    "BinaryMask",
    "build_plan",
    "ComparisonPlan",
    "default_registry",
    "dice",
    "distance_field",
    "evaluate_plan",
    "extract_mask",
    "extract_surface",
    "FilterRule",
    "fit_trend",
    "group_variability",
    "hd95",
    "LabelResampler",
    "LabelVolume",
    "LongitudinalTrend",
    "mask_volume_cm3",
    "MetricRecord",
    "NiftiError",
    "pair_metrics",
    "PairMetrics",
    "QualityFilter",
    "read_affine_transform",
    "read_label_volume",
    "ReferenceGrid",
    "resample_labels",
    "ResampleConfig",
    "RoiRegistry",
    "RoiSpec",
    "scan_dataset",
    "SessionMeta",
    "Side",
    "summarize_acquisition",
    "surface_dice",
    "UndefinedMetricError",
    "volume_mape",
    "write_label_volume",
]
