import os

import numpy as np
import pytest

from fundusfusion.evaluation import (
    PredictionSet,
    UndefinedMetricError,
    bootstrap_ci,
    confusion,
    curve_band,
    group_confusions,
    paired_difference,
    percentile_ranks,
    subgroup_eval,
)
from fundusfusion.evaluation import _kernels_py
from fundusfusion.evaluation._backend import BACKEND, kernels
from oracles import exact_percentile_bounds, exhaustive_bootstrap, hand_f1, pairwise_auc


def noisy_set(rng, n=120, noise=0.35):
    label = rng.integers(0, 2, n)
    prob = np.clip(label * 0.4 + 0.3 + rng.normal(0, noise, n), 0, 1)
    prob = np.round(prob, 2)
    diabetes = rng.integers(0, 2, n)
    patients = [f"p{i // 2:04d}" for i in range(n)]
    return PredictionSet.from_arrays(prob, label, patient_id=patients, diabetes=diabetes)


def test_percentile_ranks():
    assert percentile_ranks(1) == (0, 0)
    assert percentile_ranks(10_000) == (249, 9750)
    assert percentile_ranks(200_000) == (4999, 195_000)
    assert percentile_ranks(40) == (0, 39)


@pytest.mark.skipif(os.environ.get("FUNDUSFUSION_PURE_PYTHON", "") not in ("", "0"),
                    reason="numpy fallback forced")
def test_compiled_backend_in_use():
    assert BACKEND == "compiled"


def test_backends_bit_identical(rng):
    n = 90
    label = rng.integers(0, 2, n)
    score = np.round(rng.random(n), 1)
    uniq, grp = np.unique(score, return_inverse=True)
    pred = (score >= 0.5).astype(np.int64)
    ptr, rows = np.arange(n + 1), np.arange(n)
    a = kernels.bootstrap_counts(11, 3, 800, ptr, rows, label, pred, grp, len(uniq), True, 100)
    b = _kernels_py.bootstrap_counts(11, 3, 800, ptr, rows, label, pred, grp, len(uniq), True, 100)
    for x, y in zip(a, b):
        assert np.array_equal(x, y)
    assert np.array_equal(kernels.draw_indices(5, 7, 2, 33), _kernels_py.draw_indices(5, 7, 2, 33))


def test_kernel_resample_matches_direct_recount(rng):
    preds = noisy_set(rng, 40).canonical()
    score, label = preds.probability, preds.label
    uniq, grp = np.unique(score, return_inverse=True)
    pred = (score >= 0.5).astype(np.int64)
    counts, u2, ap, att = kernels.bootstrap_counts(
        3, 0, 25, np.arange(41), np.arange(40), label, pred, grp, len(uniq), True, 100)
    for b in range(25):
        idx = kernels.draw_indices(3, b, int(att[b]), 40)
        ys, ss = label[idx], score[idx]
        tp = int(np.sum((ss >= 0.5) & (ys == 1)))
        assert counts[b, 0] == tp
        pos, neg = ys.sum(), len(ys) - ys.sum()
        assert u2[b] / (2 * pos * neg) == pytest.approx(pairwise_auc(ys, ss), abs=1e-12)


def test_perfect_classifier_f1_ci_degenerate():
    preds = PredictionSet.from_arrays([0.9, 0.8, 0.7, 0.2, 0.1, 0.3], [1, 1, 1, 0, 0, 0])
    res = bootstrap_ci(preds, ["f1", "auc"], B=500, seed=1)
    assert (res["f1"].lo, res["f1"].hi) == (1.0, 1.0)
    assert (res["auc"].lo, res["auc"].hi) == (1.0, 1.0)


@pytest.mark.parametrize("labels,scores", [
    ((1, 0, 1, 0), (0.9, 0.6, 0.4, 0.2)),
    ((1, 1, 0, 1), (0.9, 0.4, 0.7, 0.8)),
])
def test_exhaustive_enumeration_small(labels, scores):
    dist = exhaustive_bootstrap(labels, scores, hand_f1)
    lo, hi = exact_percentile_bounds(dist)
    res = bootstrap_ci(PredictionSet.from_arrays(scores, labels), ["f1"], B=20_000, seed=3)
    assert abs(res["f1"].lo - lo) <= 0.02
    assert abs(res["f1"].hi - hi) <= 0.02


def test_redraws_recorded():
    preds = PredictionSet.from_arrays([0.9, 0.6, 0.4, 0.2], [1, 0, 1, 0])
    res = bootstrap_ci(preds, ["auc"], B=4000, seed=0)
    # P(single class) = 2 / 16 for two positives and two negatives
    assert 0.08 < res.redraws / 4000 < 0.17
    assert np.all(np.isfinite(res.distributions["auc"]))


def test_single_class_rank_metric_rejected():
    preds = PredictionSet.from_arrays([0.9, 0.6], [1, 1])
    with pytest.raises(UndefinedMetricError):
        bootstrap_ci(preds, ["auc"], B=10)
    res = bootstrap_ci(preds, ["f1"], B=10)
    assert res["f1"].point == 1.0


def test_worker_count_invariance(rng):
    preds = noisy_set(rng)
    one = bootstrap_ci(preds, B=3001, seed=9, workers=1)
    many = bootstrap_ci(preds, B=3001, seed=9, workers=4)
    for k in one.distributions:
        assert np.array_equal(one.distributions[k], many.distributions[k])
    assert one.to_dict() == many.to_dict()


def test_row_order_invariance(rng):
    preds = noisy_set(rng)
    shuffled = preds.take(rng.permutation(len(preds)))
    a = bootstrap_ci(preds, B=1000, seed=4).to_dict()
    b = bootstrap_ci(shuffled, B=1000, seed=4).to_dict()
    assert a == b


def test_ci_brackets_and_unit_interval(rng):
    res = bootstrap_ci(noisy_set(rng), B=2000, seed=2)
    for name, ci in res.metrics.items():
        d = res.distributions[name]
        assert 0 <= ci.lo <= ci.hi <= 1
        assert d.min() <= ci.lo and ci.hi <= d.max()


def test_patient_cluster_mode(rng):
    preds = noisy_set(rng, 60)
    res = bootstrap_ci(preds, ["f1", "auc"], B=500, seed=5, unit="patient")
    assert res.unit == "patient"
    assert res.to_dict()["notes"] == []
    assert res.distributions["f1"].shape == (500,)
    # whole patients are drawn: both images of a patient share one weight
    from fundusfusion.evaluation.bootstrap import _Resampler

    sampler = _Resampler(preds, "patient")
    pid = sampler.preds.patient_id
    for it in range(50):
        w = sampler.weights(5, it, 0)
        assert w.sum() == len(preds)
        for p in np.unique(pid):
            assert len(set(w[pid == p])) == 1


def test_paired_self_comparison_exact_zero(rng):
    preds = noisy_set(rng)
    res = paired_difference(preds, preds, "f1", B=2000, seed=1)
    assert (res.ci_lo, res.ci_hi) == (0.0, 0.0)
    assert not res.significant
    assert np.all(res.differences == 0)


def test_paired_antisymmetry(rng):
    a = noisy_set(rng)
    b = a.with_probability(np.clip(a.probability[::-1], 0, 1))
    ab = paired_difference(a, b, "f1", B=2000, seed=8)
    ba = paired_difference(b, a, "f1", B=2000, seed=8)
    assert np.array_equal(ab.differences, -ba.differences)
    assert (ab.ci_lo, ab.ci_hi) == (-ba.ci_hi, -ba.ci_lo)
    assert ab.mean_difference == -ba.mean_difference


def test_paired_dominance_significant(rng):
    n = 80
    label = np.tile([1, 0], n // 2)
    good = np.where(label == 1, 0.9, 0.1)
    bad = good.copy()
    flip = rng.choice(n, n // 2, replace=False)
    bad[flip] = np.where(label[flip] == 1, 0.3, 0.7)
    a = PredictionSet.from_arrays(good, label)
    b = PredictionSet.from_arrays(bad, label)
    res = paired_difference(a, b, "f1", B=2000, seed=0)
    assert res.ci_lo > 0 and res.significant


def test_paired_requires_identical_rows(rng):
    a = noisy_set(rng, 10)
    b = PredictionSet.from_arrays(a.probability, a.label,
                                  image_id=[f"x{i}" for i in range(10)])
    with pytest.raises(ValueError):
        paired_difference(a, b, B=10)


def test_paired_format():
    res = paired_difference(
        PredictionSet.from_arrays([0.9, 0.2, 0.7, 0.4], [1, 0, 1, 0]),
        PredictionSet.from_arrays([0.9, 0.2, 0.3, 0.4], [1, 0, 1, 0]), B=200)
    assert res.format().count("[") == 1


def test_subgroup_union_and_sizes(rng):
    preds = noisy_set(rng, 100)
    groups = group_confusions(preds)
    total = groups["positive"] + groups["negative"]
    assert total == confusion(preds)
    sub = subgroup_eval(preds, B=300, seed=3)
    n_pos = int(preds.diabetes.sum())
    assert sub.sizes == {"positive": n_pos, "negative": 100 - n_pos}
    assert sub.describe_sizes() == (
        f"{n_pos} ({100 * n_pos / 100:.0f}%) and {100 - n_pos} ({100 * (100 - n_pos) / 100:.0f}%)")


def test_subgroup_perfect_group_and_empty_group():
    preds = PredictionSet.from_arrays([0.9, 0.1, 0.8, 0.3], [1, 0, 1, 0], diabetes=[1, 1, 1, 1])
    sub = subgroup_eval(preds, B=100)
    assert (sub.results["positive"]["f1"].lo, sub.results["positive"]["f1"].hi) == (1.0, 1.0)
    assert sub.results["negative"] is None and sub.sizes["negative"] == 0


def test_curve_band_single_run_identical(rng):
    band = curve_band(noisy_set(rng), "roc", B=1, seed=0)
    assert band.runs["lower"] == band.runs["median"] == band.runs["upper"] == 0
    x0, y0 = band.curves["lower"]
    assert np.array_equal(x0, band.curves["upper"][0])


@pytest.mark.parametrize("B", [200, 201])
def test_curve_band_median_definition(rng, B):
    preds = noisy_set(rng)
    band = curve_band(preds, "roc", B=B, seed=6)
    assert band.run_areas["median"] == np.sort(band.areas)[(B - 1) // 2]
    res = bootstrap_ci(preds, ["auc"], B=B, seed=6)
    assert band.run_areas["lower"] == res["auc"].lo and band.run_areas["upper"] == res["auc"].hi
    for band_name in ("lower", "median", "upper"):
        fpr, tpr = band.curves[band_name]
        assert np.all(np.diff(fpr) >= 0)
        area = np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2)
        assert area == pytest.approx(band.run_areas[band_name], abs=1e-12)


def test_curve_band_pr(rng):
    band = curve_band(noisy_set(rng), "pr", B=150, seed=1)
    r, p = band.curves["median"]
    assert np.sum(np.diff(r) * p[1:]) == pytest.approx(band.run_areas["median"], abs=1e-12)
