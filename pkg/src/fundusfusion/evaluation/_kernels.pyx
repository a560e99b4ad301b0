# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled bootstrap kernel; mirrors ``_kernels_py`` exactly."""

import numpy as np

from libc.stdint cimport int64_t, uint64_t
from libc.stdlib cimport calloc, free, malloc

cdef uint64_t GOLDEN = 0x9E3779B97F4A7C15ULL
cdef uint64_t ATTEMPT = 0xD1B54A32D192ED03ULL


cdef inline uint64_t _mix(uint64_t z) noexcept nogil:
    z = z ^ (z >> 30)
    z = z * 0xBF58476D1CE4E5B9ULL
    z = z ^ (z >> 27)
    z = z * 0x94D049BB133111EBULL
    return z ^ (z >> 31)


cdef inline uint64_t _key(uint64_t seed, int64_t it, int64_t att) noexcept nogil:
    cdef uint64_t base = _mix(seed ^ _mix(<uint64_t>(it + 1) * GOLDEN))
    return _mix(base + <uint64_t>(att + 1) * ATTEMPT)


cdef inline int64_t _below(uint64_t x, uint64_t n) noexcept nogil:
    cdef uint64_t hi = (x >> 32) * n
    cdef uint64_t lo = ((x & 0xFFFFFFFFULL) * n) >> 32
    return <int64_t>((hi + lo) >> 32)


def draw_indices(seed, int64_t iteration, int64_t attempt, int64_t n):
    """Cluster indices drawn by one bootstrap iteration (one attempt)."""
    out = np.empty(n, dtype=np.int64)
    cdef int64_t[::1] o = out
    cdef uint64_t key = _key(<uint64_t>seed, iteration, attempt)
    cdef int64_t j
    for j in range(n):
        o[j] = _below(_mix(key + <uint64_t>(j + 1) * GOLDEN), <uint64_t>n)
    return out


def bootstrap_counts(seed, int64_t start, int64_t stop, ptr, rows, label,
                     pred_pos, group, int64_t n_groups, bint rank,
                     int64_t max_retries):
    """Per-iteration confusion counts and rank statistics (see _kernels_py)."""
    cdef const int64_t[::1] cptr = np.ascontiguousarray(ptr, dtype=np.int64)
    cdef const int64_t[::1] crows = np.ascontiguousarray(rows, dtype=np.int64)
    cdef const int64_t[::1] clab = np.ascontiguousarray(label, dtype=np.int64)
    cdef const int64_t[::1] cpred = np.ascontiguousarray(pred_pos, dtype=np.int64)
    cdef const int64_t[::1] cgrp = np.ascontiguousarray(group, dtype=np.int64)
    cdef int64_t m = stop - start if stop > start else 0
    cdef int64_t k = cptr.shape[0] - 1
    cdef uint64_t useed = <uint64_t>seed

    counts = np.zeros((m, 4), dtype=np.int64)
    u2 = np.zeros(m, dtype=np.int64)
    ap = np.zeros(m, dtype=np.float64)
    attempts = np.zeros(m, dtype=np.int64)
    cdef int64_t[:, ::1] oc = counts
    cdef int64_t[::1] ou = u2
    cdef double[::1] oa = ap
    cdef int64_t[::1] ot = attempts

    cdef int64_t *draws = <int64_t *>malloc(max(k, 1) * sizeof(int64_t))
    cdef int64_t *posw = <int64_t *>calloc(max(n_groups, 1), sizeof(int64_t))
    cdef int64_t *negw = <int64_t *>calloc(max(n_groups, 1), sizeof(int64_t))
    if draws == NULL or posw == NULL or negw == NULL:
        free(draws); free(posw); free(negw)
        raise MemoryError()

    cdef int64_t b, att, j, r, row, c, g, tp, fp, pos, total, below, tpc, fpc
    cdef uint64_t key
    cdef double acc
    cdef bint failed = False
    try:
        with nogil:
            for b in range(m):
                att = 0
                while True:
                    key = _key(useed, start + b, att)
                    tp = 0
                    fp = 0
                    pos = 0
                    total = 0
                    for j in range(k):
                        c = _below(_mix(key + <uint64_t>(j + 1) * GOLDEN), <uint64_t>k)
                        draws[j] = c
                        for r in range(cptr[c], cptr[c + 1]):
                            row = crows[r]
                            total += 1
                            pos += clab[row]
                            tp += clab[row] * cpred[row]
                            fp += (1 - clab[row]) * cpred[row]
                    if max_retries < 0 or (pos > 0 and pos < total):
                        break
                    att += 1
                    if att > max_retries:
                        failed = True
                        break
                if failed:
                    break
                oc[b, 0] = tp
                oc[b, 1] = fp
                oc[b, 2] = pos - tp
                oc[b, 3] = (total - pos) - fp
                ot[b] = att
                if not rank:
                    continue
                for g in range(n_groups):
                    posw[g] = 0
                    negw[g] = 0
                for j in range(k):
                    c = draws[j]
                    for r in range(cptr[c], cptr[c + 1]):
                        row = crows[r]
                        if clab[row]:
                            posw[cgrp[row]] += 1
                        else:
                            negw[cgrp[row]] += 1
                below = 0
                for g in range(n_groups):
                    ou[b] += posw[g] * (2 * below + negw[g])
                    below += negw[g]
                tpc = 0
                fpc = 0
                acc = 0.0
                for g in range(n_groups - 1, -1, -1):
                    tpc += posw[g]
                    fpc += negw[g]
                    if posw[g] > 0:
                        acc += (<double>posw[g] / <double>pos) * (<double>tpc / <double>(tpc + fpc))
                oa[b] = acc
    finally:
        free(draws)
        free(posw)
        free(negw)
    if failed:
        raise RuntimeError(
            "bootstrap redraw limit exceeded: resamples keep containing a "
            "single class")
    return counts, u2, ap, attempts
