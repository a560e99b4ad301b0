"""Pure numpy bootstrap kernel.

Reference implementation of the hot loop; ``_kernels.pyx`` computes the same
quantities (bit for bit) in compiled code.  Index draws come from a
counter-based generator keyed on ``(seed, iteration, attempt, draw)`` so any
iteration can be reproduced in isolation, whatever the chunking or worker
count.
"""

import numpy as np

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_ATTEMPT = np.uint64(0xD1B54A32D192ED03)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_LO32 = np.uint64(0xFFFFFFFF)
_S27, _S30, _S31, _S32 = (np.uint64(s) for s in (27, 30, 31, 32))

# rows x draws budget per vectorized chunk
_CHUNK_CELLS = 2_000_000


def _mix(z):
    z = z ^ (z >> _S30)
    z = z * _M1
    z = z ^ (z >> _S27)
    z = z * _M2
    return z ^ (z >> _S31)


def _keys(seed, iterations, attempts):
    it = np.asarray(iterations, dtype=np.uint64) + np.uint64(1)
    att = np.asarray(attempts, dtype=np.uint64) + np.uint64(1)
    base = _mix(np.uint64(seed) ^ _mix(it * _GOLDEN))
    return _mix(base + att * _ATTEMPT)


def _below(x, n):
    """floor(x * n / 2**64) for uint64 ``x`` and ``n < 2**32``."""
    n = np.uint64(n)
    hi = (x >> _S32) * n
    lo = ((x & _LO32) * n) >> _S32
    return ((hi + lo) >> _S32).astype(np.int64)


def _draw_block(keys, n_draws):
    steps = (np.arange(1, n_draws + 1, dtype=np.uint64) * _GOLDEN)[None, :]
    return _below(_mix(keys[:, None] + steps), n_draws)


def draw_indices(seed, iteration, attempt, n):
    """Cluster indices drawn by one bootstrap iteration (one attempt)."""
    keys = _keys(seed, [iteration], [attempt])
    return _draw_block(keys, n)[0]


def _row_weights(draws, ptr, rows, n_rows):
    m, k = draws.shape
    flat = (draws + (np.arange(m, dtype=np.int64) * k)[:, None]).ravel()
    cluster_counts = np.bincount(flat, minlength=m * k).reshape(m, k)
    sizes = np.diff(ptr)
    cluster_of_row = np.empty(n_rows, dtype=np.int64)
    cluster_of_row[rows] = np.repeat(np.arange(k, dtype=np.int64), sizes)
    return cluster_counts[:, cluster_of_row]


def bootstrap_counts(seed, start, stop, ptr, rows, label, pred_pos, group,
                     n_groups, rank, max_retries):
    """Per-iteration confusion counts and rank statistics.

    Returns ``(counts, u2, ap, attempts)``: ``counts[:, :]`` holds
    ``tp, fp, fn, tn``; ``u2`` is twice the Mann-Whitney U (ties count one
    half); ``ap`` is step-wise average precision with tied scores forming a
    single threshold; ``attempts`` is the redraw index that produced each
    accepted resample.  ``max_retries < 0`` disables the single-class redraw.
    """
    ptr = np.ascontiguousarray(ptr, dtype=np.int64)
    rows = np.ascontiguousarray(rows, dtype=np.int64)
    label = np.ascontiguousarray(label, dtype=np.int64)
    pred = np.ascontiguousarray(pred_pos, dtype=np.int64)
    group = np.ascontiguousarray(group, dtype=np.int64)
    n_rows = label.shape[0]
    n_clusters = ptr.shape[0] - 1
    m = stop - start

    counts = np.zeros((m, 4), dtype=np.int64)
    u2 = np.zeros(m, dtype=np.int64)
    ap = np.zeros(m, dtype=np.float64)
    attempts = np.zeros(m, dtype=np.int64)
    if m <= 0:
        return counts, u2, ap, attempts

    order = np.argsort(group, kind="stable")
    starts = np.searchsorted(group[order], np.arange(n_groups))
    tp_row = label * pred
    fp_row = (1 - label) * pred
    chunk = max(1, _CHUNK_CELLS // max(n_rows, n_clusters, 1))

    for c0 in range(0, m, chunk):
        c1 = min(m, c0 + chunk)
        its = np.arange(start + c0, start + c1, dtype=np.int64)
        att = np.zeros(c1 - c0, dtype=np.int64)
        w = _row_weights(_draw_block(_keys(seed, its, att), n_clusters),
                         ptr, rows, n_rows)
        pos = w @ label
        total = w.sum(axis=1)
        if max_retries >= 0:
            bad = (pos == 0) | (pos == total)
            while bad.any():
                att[bad] += 1
                if att.max() > max_retries:
                    raise RuntimeError(
                        "bootstrap redraw limit exceeded: resamples keep "
                        "containing a single class")
                redo = np.flatnonzero(bad)
                w_new = _row_weights(
                    _draw_block(_keys(seed, its[redo], att[redo]), n_clusters),
                    ptr, rows, n_rows)
                w[redo] = w_new
                pos[redo] = w_new @ label
                total[redo] = w_new.sum(axis=1)
                bad[:] = False
                bad[redo] = (pos[redo] == 0) | (pos[redo] == total[redo])

        tp = w @ tp_row
        fp = w @ fp_row
        neg = total - pos
        counts[c0:c1, 0] = tp
        counts[c0:c1, 1] = fp
        counts[c0:c1, 2] = pos - tp
        counts[c0:c1, 3] = neg - fp
        attempts[c0:c1] = att

        if rank:
            ws = w[:, order]
            posw = np.add.reduceat(ws * label[order], starts, axis=1)
            negw = np.add.reduceat(ws * (1 - label[order]), starts, axis=1)
            below = np.cumsum(negw, axis=1) - negw
            u2[c0:c1] = (posw * (2 * below + negw)).sum(axis=1)

            posr = posw[:, ::-1]
            tp_cum = np.cumsum(posr, axis=1)
            fp_cum = np.cumsum(negw[:, ::-1], axis=1)
            with np.errstate(invalid="ignore", divide="ignore"):
                term = (posr / pos[:, None]) * (tp_cum / (tp_cum + fp_cum))
            term = np.where(posr > 0, term, 0.0)
            ap[c0:c1] = np.cumsum(term, axis=1)[:, -1]
    return counts, u2, ap, attempts
