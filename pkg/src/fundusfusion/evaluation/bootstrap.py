"""Percentile bootstrap: confidence intervals, paired differences, subgroups,
and median ROC/PR bands.

Resampling happens over the canonical row order (sorted by image id), so
shuffling a PredictionSet never changes a result.  Iteration ``b`` draws its
indices from a stream keyed on ``(seed, b)``; splitting the work across
threads therefore gives bit-identical output for any worker count.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from ._backend import BACKEND, kernels
from .metrics import (
    ALL_METRICS,
    RANK_METRICS,
    UndefinedMetricError,
    average_precision,
    confusion,
    confusion_metrics,
    pr_curve,
    rates_from_counts,
    roc_auc_score,
    roc_curve,
)
from .predictions import PredictionSet

DEFAULT_B = 10_000
MAX_REDRAWS = 1000
CORRELATION_NOTE = (
    "image-level resampling treats images of one patient as independent "
    "observations; use unit='patient' for a patient-clustered bootstrap")


def percentile_ranks(n: int, level: float = 0.95) -> tuple[int, int]:
    """0-based positions of the lower/upper bound in a sorted sample of ``n``.

    Nearest-rank on each tail: the lower bound is the ``ceil(n * alpha / 2)``-th
    smallest value and the upper bound the same rank counted from the top, so
    negating a sample negates and swaps its interval exactly.
    """
    if n < 1:
        raise ValueError("need at least one bootstrap value")
    tail = (1 - Fraction(str(level))) / 2
    k = max(1, math.ceil(n * tail))
    return k - 1, n - k


def percentile_interval(values, level: float = 0.95) -> tuple[float, float]:
    v = np.sort(np.asarray(values, dtype=np.float64), kind="stable")
    lo, hi = percentile_ranks(len(v), level)
    return float(v[lo]), float(v[hi])


@dataclass(frozen=True)
class MetricCI:
    point: float
    lo: float
    hi: float

    def format(self, digits: int = 3) -> str:
        return f"{self.point:.{digits}f} [{self.lo:.{digits}f}, {self.hi:.{digits}f}]"


@dataclass
class BootstrapResult:
    metrics: dict[str, MetricCI]
    B: int
    seed: int
    threshold: float
    level: float
    unit: str
    n: int
    redraws: int
    distributions: dict[str, np.ndarray] = field(repr=False, default_factory=dict)

    def __getitem__(self, name: str) -> MetricCI:
        return self.metrics[name]

    def to_dict(self) -> dict:
        return {
            "metrics": {k: {"point": v.point, "ci_lo": v.lo, "ci_hi": v.hi}
                        for k, v in self.metrics.items()},
            "B": self.B,
            "seed": self.seed,
            "threshold": self.threshold,
            "level": self.level,
            "unit": self.unit,
            "n": self.n,
            "redrawn_resamples": self.redraws,
            "percentile_method": "nearest-rank, symmetric tails",
            "pr_estimator": "step-wise average precision, ties as one threshold",
            "notes": [CORRELATION_NOTE] if self.unit == "image" else [],
        }


@dataclass
class PairedDifferenceResult:
    metric: str
    mean_difference: float
    point_difference: float
    ci_lo: float
    ci_hi: float
    significant: bool
    B: int
    seed: int
    differences: np.ndarray = field(repr=False, default=None)

    def format(self, digits: int = 3) -> str:
        return (f"{self.mean_difference:.{digits}f} "
                f"[{self.ci_lo:.{digits}f}, {self.ci_hi:.{digits}f}]")

    def to_dict(self) -> dict:
        return {
            "metric": self.metric,
            "mean_difference": self.mean_difference,
            "point_difference": self.point_difference,
            "ci_lo": self.ci_lo,
            "ci_hi": self.ci_hi,
            "significant": self.significant,
            "B": self.B,
            "seed": self.seed,
            "formatted": self.format(),
        }


@dataclass
class CurveBand:
    kind: str
    areas: np.ndarray = field(repr=False)
    runs: dict[str, int]
    run_areas: dict[str, float]
    curves: dict[str, tuple[np.ndarray, np.ndarray]] = field(repr=False)

    def rows(self):
        """(band, x, y) rows; x/y are (fpr, tpr) for ROC, (recall, precision) for PR."""
        for band in ("lower", "median", "upper"):
            x, y = self.curves[band]
            for xi, yi in zip(x, y):
                yield band, float(xi), float(yi)


class _Resampler:
    """Canonical rows plus the cluster layout the kernel draws from."""

    def __init__(self, preds: PredictionSet, unit: str = "image"):
        if unit not in ("image", "patient"):
            raise ValueError(f"unknown bootstrap unit {unit!r}")
        self.preds = preds.canonical()
        self.unit = unit
        n = len(self.preds)
        if unit == "image":
            self.ptr = np.arange(n + 1, dtype=np.int64)
            self.rows = np.arange(n, dtype=np.int64)
        else:
            patients, inv = np.unique(self.preds.patient_id, return_inverse=True)
            self.rows = np.argsort(inv, kind="stable").astype(np.int64)
            sizes = np.bincount(inv, minlength=len(patients))
            self.ptr = np.concatenate([[0], np.cumsum(sizes)]).astype(np.int64)
        self.n_clusters = len(self.ptr) - 1
        label = self.preds.label
        self.both_classes = 0 < label.sum() < len(label)

    def run(self, score, threshold, B, seed, rank, workers=1):
        label = self.preds.label
        pred_pos = (score >= threshold).astype(np.int64)
        uniq, group = np.unique(score, return_inverse=True)
        retries = MAX_REDRAWS if self.both_classes else -1
        args = (self.ptr, self.rows, label, pred_pos, group, len(uniq), rank, retries)

        if workers <= 1 or B < 2 * workers:
            return kernels.bootstrap_counts(seed, 0, B, *args)
        step = math.ceil(B / (4 * workers))
        bounds = [(s, min(B, s + step)) for s in range(0, B, step)]
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(
                lambda se: kernels.bootstrap_counts(seed, se[0], se[1], *args),
                bounds))
        return tuple(np.concatenate([p[i] for p in parts]) for i in range(4))

    def weights(self, seed, iteration, attempt):
        draws = kernels.draw_indices(seed, iteration, attempt, self.n_clusters)
        per_cluster = np.bincount(draws, minlength=self.n_clusters)
        w = np.empty(len(self.preds), dtype=np.int64)
        w[self.rows] = np.repeat(per_cluster, np.diff(self.ptr))
        return w


def _distributions(counts, u2, ap, wanted):
    tp, fp, fn, tn = counts.T
    out = {k: v for k, v in rates_from_counts(tp, fp, fn, tn).items() if k in wanted}
    if "auc" in wanted:
        pos, neg = tp + fn, fp + tn
        out["auc"] = u2 / (2.0 * pos * neg)
    if "pr" in wanted:
        out["pr"] = ap.copy()
    return out


def _points(preds: PredictionSet, wanted, threshold):
    base = confusion_metrics(preds, threshold).as_dict()
    pts = {k: base[k] for k in wanted if k in base}
    if "auc" in wanted:
        pts["auc"] = roc_auc_score(preds.label, preds.probability)
    if "pr" in wanted:
        pts["pr"] = average_precision(preds.label, preds.probability)
    return pts


def _check_metrics(metrics):
    metrics = tuple(metrics)
    unknown = set(metrics) - set(ALL_METRICS)
    if unknown:
        raise ValueError(f"unknown metrics: {sorted(unknown)}")
    return tuple(m for m in ALL_METRICS if m in metrics)


def bootstrap_ci(preds: PredictionSet, metrics=ALL_METRICS, B: int = DEFAULT_B,
                 seed: int = 0, threshold: float = 0.5, level: float = 0.95,
                 unit: str = "image", workers: int = 1) -> BootstrapResult:
    """Percentile bootstrap CI for each requested metric.

    Each of the ``B`` resamples draws ``n`` observations with replacement;
    single-class resamples are redrawn and counted.  Point estimates come
    from the original set.
    """
    if B < 1:
        raise ValueError("B must be >= 1")
    wanted = _check_metrics(metrics)
    sampler = _Resampler(preds, unit)
    rank = any(m in RANK_METRICS for m in wanted)
    if rank and not sampler.both_classes:
        raise UndefinedMetricError(
            "rank metrics requested on a set containing a single class")
    p = sampler.preds
    counts, u2, ap, attempts = sampler.run(p.probability, threshold, B, seed,
                                           rank, workers)
    dists = _distributions(counts, u2, ap, wanted)
    points = _points(p, wanted, threshold)
    cis = {}
    for name in wanted:
        lo, hi = percentile_interval(dists[name], level)
        cis[name] = MetricCI(float(points[name]), lo, hi)
    return BootstrapResult(cis, B, seed, threshold, level, unit, len(p),
                           int(np.count_nonzero(attempts)), dists)


def paired_difference(preds_a: PredictionSet, preds_b: PredictionSet,
                      metric: str = "f1", B: int = DEFAULT_B, seed: int = 0,
                      threshold: float = 0.5, level: float = 0.95,
                      unit: str = "image", workers: int = 1) -> PairedDifferenceResult:
    """Bootstrap CI of ``metric(a) - metric(b)`` on shared resamples."""
    if not preds_a.same_rows(preds_b):
        raise ValueError("paired comparison needs identical image ids and labels")
    wanted = _check_metrics([metric])
    sa, sb = _Resampler(preds_a, unit), _Resampler(preds_b, unit)
    rank = metric in RANK_METRICS
    if rank and not sa.both_classes:
        raise UndefinedMetricError(f"{metric} undefined on a single-class set")
    ra = sa.run(sa.preds.probability, threshold, B, seed, rank, workers)
    rb = sb.run(sb.preds.probability, threshold, B, seed, rank, workers)
    if not np.array_equal(ra[3], rb[3]):
        raise RuntimeError("paired resamples diverged")
    da = _distributions(ra[0], ra[1], ra[2], wanted)[metric]
    db = _distributions(rb[0], rb[1], rb[2], wanted)[metric]
    diff = da - db
    lo, hi = percentile_interval(diff, level)
    point = (_points(sa.preds, wanted, threshold)[metric]
             - _points(sb.preds, wanted, threshold)[metric])
    return PairedDifferenceResult(metric, float(np.mean(diff)), float(point), lo, hi,
                                  not (lo <= 0.0 <= hi), B, seed, diff)


@dataclass
class SubgroupResult:
    field: str
    sizes: dict[str, int]
    results: dict[str, BootstrapResult | None]

    def share(self, group: str) -> float:
        total = sum(self.sizes.values())
        return 100.0 * self.sizes[group] / total if total else 0.0

    def describe_sizes(self) -> str:
        parts = [f"{self.sizes[g]} ({self.share(g):.0f}%)" for g in self.sizes]
        return " and ".join(parts)

    def to_dict(self) -> dict:
        return {
            "field": self.field,
            "groups": {g: {"n": self.sizes[g],
                           "percent": self.share(g),
                           "report": None if r is None else r.to_dict()}
                       for g, r in self.results.items()},
        }


def subgroup_eval(preds: PredictionSet, group_field: str = "diabetes",
                  B: int = DEFAULT_B, seed: int = 0, threshold: float = 0.5,
                  level: float = 0.95, unit: str = "image",
                  workers: int = 1) -> SubgroupResult:
    """Independent bootstrap within each value of a 0/1 row flag."""
    if group_field != "diabetes":
        raise ValueError(f"unsupported subgroup field {group_field!r}")
    flag = preds.diabetes
    sizes, results = {}, {}
    for name, value in (("positive", 1), ("negative", 0)):
        idx = np.flatnonzero(flag == value)
        sizes[name] = len(idx)
        if len(idx) == 0:
            results[name] = None
            continue
        part = preds.take(idx)
        single = part.label.sum() in (0, len(part))
        wanted = [m for m in ALL_METRICS if not (single and m in RANK_METRICS)]
        results[name] = bootstrap_ci(part, wanted, B, seed, threshold, level,
                                     unit, workers)
    return SubgroupResult(group_field, sizes, results)


def group_confusions(preds: PredictionSet, threshold: float = 0.5):
    """Confusion matrix per diabetes flag; their sum is the full matrix."""
    out = {}
    for name, value in (("positive", 1), ("negative", 0)):
        idx = np.flatnonzero(preds.diabetes == value)
        if len(idx):
            out[name] = confusion(preds.take(idx), threshold)
    return out


def curve_band(preds: PredictionSet, kind: str = "roc", B: int = DEFAULT_B,
               seed: int = 0, level: float = 0.95, unit: str = "image",
               workers: int = 1) -> CurveBand:
    """Curves of the bootstrap runs at the median and percentile areas.

    Runs are ranked by area (stable, so equal areas keep iteration order);
    the median is the lower median for even ``B``.
    """
    kind = kind.lower()
    if kind not in ("roc", "pr"):
        raise ValueError(f"kind must be 'roc' or 'pr', got {kind!r}")
    sampler = _Resampler(preds, unit)
    if not sampler.both_classes:
        raise UndefinedMetricError("curve band needs both classes present")
    p = sampler.preds
    counts, u2, ap, attempts = sampler.run(p.probability, 0.5, B, seed, True, workers)
    metric = "auc" if kind == "roc" else "pr"
    areas = _distributions(counts, u2, ap, (metric,))[metric]
    order = np.argsort(areas, kind="stable")
    lo, hi = percentile_ranks(B, level)
    runs = {"lower": int(order[lo]), "median": int(order[(B - 1) // 2]),
            "upper": int(order[hi])}
    curves = {}
    for band, it in runs.items():
        w = sampler.weights(seed, it, int(attempts[it]))
        if kind == "roc":
            fpr, tpr, _ = roc_curve(p.label, p.probability, w)
            curves[band] = (fpr, tpr)
        else:
            curves[band] = pr_curve(p.label, p.probability, w)
    return CurveBand(kind, areas, runs, {b: float(areas[i]) for b, i in runs.items()},
                     curves)


__all__ = [
    "BACKEND",
    "BootstrapResult",
    "CurveBand",
    "MetricCI",
    "PairedDifferenceResult",
    "SubgroupResult",
    "bootstrap_ci",
    "curve_band",
    "group_confusions",
    "paired_difference",
    "percentile_interval",
    "percentile_ranks",
    "subgroup_eval",
]
