"""Independent brute-force oracles used by the test-suite.

Nothing here imports the package's metric or bootstrap code.
"""

import itertools
from fractions import Fraction


def pairwise_auc(labels, scores):
    """O(n^2) Mann-Whitney: count positive/negative pairs, ties score 1/2."""
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    total = Fraction(0)
    for p in pos:
        for q in neg:
            total += 1 if p > q else Fraction(1, 2) if p == q else 0
    return float(total / (len(pos) * len(neg)))


def hand_f1(labels, scores, threshold=0.5):
    tp = fp = fn = 0
    for y, s in zip(labels, scores):
        hit = s >= threshold
        tp += hit and y == 1
        fp += hit and y == 0
        fn += (not hit) and y == 1
    prec = tp / (tp + fp) if tp + fp else 0.0
    rec = tp / (tp + fn) if tp + fn else 0.0
    return 2 * prec * rec / (prec + rec) if prec + rec else 0.0


def exhaustive_bootstrap(labels, scores, statistic, drop_single_class=True):
    """Exact resample distribution: every index tuple of length n, equally likely.

    Returns {value: probability}.  Single-class resamples are excluded (and
    the remainder renormalized) when ``drop_single_class`` is set.
    """
    n = len(labels)
    dist = {}
    kept = 0
    for idx in itertools.product(range(n), repeat=n):
        ys = [labels[i] for i in idx]
        if drop_single_class and len(set(ys)) == 1:
            continue
        v = statistic(ys, [scores[i] for i in idx])
        dist[v] = dist.get(v, 0) + 1
        kept += 1
    return {v: Fraction(c, kept) for v, c in dist.items()}


def exact_percentile_bounds(dist, tail=Fraction(1, 40)):
    """Smallest v with P(X <= v) >= tail and largest v with P(X >= v) >= tail."""
    values = sorted(dist)
    acc = Fraction(0)
    lo = values[-1]
    for v in values:
        acc += dist[v]
        if acc >= tail:
            lo = v
            break
    acc = Fraction(0)
    hi = values[0]
    for v in reversed(values):
        acc += dist[v]
        if acc >= tail:
            hi = v
            break
    return lo, hi
