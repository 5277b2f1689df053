# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled versions of the loops in ``_pykernels``; same arithmetic order."""
import numpy as np

BACKEND = "cython"


cdef void _scaled_km(long long at_risk, const long long[:] events,
                     const long long[:] censored, double scale,
                     long long skip_bin, int skip_event, double[:] out) noexcept nogil:
    # skip_bin >= 0 removes one subject (event or censoring) from that bin
    cdef Py_ssize_t m = events.shape[0]
    cdef Py_ssize_t j
    cdef double acc = 1.0, val, last = scale
    cdef long long r = at_risk, r_start = at_risk, num, nxt, d_j, c_j
    for j in range(m):
        if r <= 0:
            out[j] = last
            continue
        d_j = events[j]
        c_j = censored[j]
        if j == skip_bin:
            if skip_event:
                d_j -= 1
            else:
                c_j -= 1
        num = r - d_j
        if num == r_start:
            val = acc * scale
        else:
            val = (acc * scale * <double>num) / <double>r_start
        out[j] = val
        last = val
        nxt = num - c_j
        if c_j > 0 and nxt > 0:
            if num != r_start:
                acc = (acc * <double>num) / <double>r_start
            r_start = nxt
        r = nxt


def scaled_km(at_risk, events, censored, scale=1.0):
    cdef const long long[:] ev = np.ascontiguousarray(events, dtype=np.int64)
    cdef const long long[:] ce = np.ascontiguousarray(censored, dtype=np.int64)
    out = np.empty(ev.shape[0], dtype=np.float64)
    _scaled_km(at_risk, ev, ce, float(scale), -1, 0, out)
    return out


def pseudo_values(at_risk, events, censored, bins, is_event, n_total):
    cdef const long long[:] ev = np.ascontiguousarray(events, dtype=np.int64)
    cdef const long long[:] ce = np.ascontiguousarray(censored, dtype=np.int64)
    cdef const long long[:] b = np.ascontiguousarray(bins, dtype=np.int64)
    cdef const unsigned char[:] e = np.ascontiguousarray(is_event, dtype=np.uint8)
    cdef Py_ssize_t n = b.shape[0], m = ev.shape[0], i, j
    cdef long long r0 = at_risk
    cdef double scale = <double>(n_total - 1)
    full_arr = np.empty(m, dtype=np.float64)
    cdef double[:] full = full_arr
    _scaled_km(r0, ev, ce, <double>n_total, -1, 0, full)
    out_arr = np.empty((n, m), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    loo_arr = np.empty(m, dtype=np.float64)
    cdef double[:] loo = loo_arr
    with nogil:
        for i in range(n):
            _scaled_km(r0 - 1, ev, ce, scale, b[i], e[i], loo)
            for j in range(m):
                out[i, j] = full[j] - loo[j]
    return out_arr


def cindex_counts(surv, times, events, time_index):
    cdef const double[:, :] s = np.ascontiguousarray(surv, dtype=np.float64)
    cdef const double[:] t = np.ascontiguousarray(times, dtype=np.float64)
    cdef const unsigned char[:] e = np.ascontiguousarray(events, dtype=np.uint8)
    cdef const long long[:] idx = np.ascontiguousarray(time_index, dtype=np.int64)
    cdef Py_ssize_t n = t.shape[0], i, j
    cdef long long k
    cdef long long concordant = 0, ties = 0, comparable = 0
    cdef double own, other
    with nogil:
        for i in range(n):
            if not e[i]:
                continue
            k = idx[i]
            for j in range(n):
                if t[j] <= t[i]:
                    continue
                comparable += 1
                if k < 0:
                    ties += 1
                    continue
                own = s[i, k]
                other = s[j, k]
                if own < other:
                    concordant += 1
                elif own == other:
                    ties += 1
    return int(concordant), int(ties), int(comparable)
