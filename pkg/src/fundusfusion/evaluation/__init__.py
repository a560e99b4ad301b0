"""Metrics, bootstrap statistics and curve bands."""

from ._backend import BACKEND
from .bootstrap import (
    BootstrapResult,
    CurveBand,
    MetricCI,
    PairedDifferenceResult,
    SubgroupResult,
    bootstrap_ci,
    curve_band,
    group_confusions,
    paired_difference,
    percentile_interval,
    percentile_ranks,
    subgroup_eval,
)
from .metrics import (
    ALL_METRICS,
    Confusion,
    MetricReport,
    UndefinedMetricError,
    confusion,
    confusion_metrics,
    metric_report,
    pr_auc,
    pr_curve,
    roc_auc,
    roc_curve,
)
from .predictions import PredictionSet

__all__ = [
    "ALL_METRICS",
    "BACKEND",
    "BootstrapResult",
    "Confusion",
    "CurveBand",
    "MetricCI",
    "MetricReport",
    "PairedDifferenceResult",
    "PredictionSet",
    "SubgroupResult",
    "UndefinedMetricError",
    "bootstrap_ci",
    "confusion",
    "confusion_metrics",
    "curve_band",
    "group_confusions",
    "metric_report",
    "paired_difference",
    "percentile_interval",
    "percentile_ranks",
    "pr_auc",
    "pr_curve",
    "roc_auc",
    "roc_curve",
    "subgroup_eval",
]
