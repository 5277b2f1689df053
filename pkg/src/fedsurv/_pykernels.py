"""Numpy implementations of the hot loops.

These mirror ``_kernels.pyx`` operation for operation so that both backends
return bitwise-identical floats.
"""
import numpy as np

BACKEND = "python"


def scaled_km(at_risk, events, censored, scale=1.0):
    """``scale * S(t_j)`` for a grouped product-limit estimate.

    Factors are grouped into runs of bins without censoring. Inside a run the
    risk set shrinks by events only, so the product telescopes to
    ``(r_j - d_j) / r_start`` and is evaluated with a single division. With no
    censoring and ``scale == at_risk`` every value is an exact integer.
    """
    m = len(events)
    out = np.empty(m, dtype=np.float64)
    scale = float(scale)
    acc = 1.0
    r = int(at_risk)
    r_start = r
    last = scale
    for j in range(m):
        if r <= 0:
            out[j] = last
            continue
        num = r - int(events[j])
        if num == r_start:
            val = acc * scale
        else:
            val = (acc * scale * num) / r_start
        out[j] = val
        last = val
        nxt = num - int(censored[j])
        if censored[j] > 0 and nxt > 0:
            if num != r_start:
                acc = (acc * num) / r_start
            r_start = nxt
        r = nxt
    return out


def pseudo_values(at_risk, events, censored, bins, is_event, n_total):
    """Jackknife pseudo values for every subject, shape ``(n, m)``.

    ``bins`` holds each subject's 0-based bin, or ``m`` for times past the
    last grid point. ``n_total`` is the pooled sample size N.
    """
    events = np.asarray(events, dtype=np.int64)
    censored = np.asarray(censored, dtype=np.int64)
    bins = np.asarray(bins, dtype=np.int64)
    is_event = np.asarray(is_event, dtype=bool)
    n = bins.shape[0]
    m = events.shape[0]
    full = scaled_km(at_risk, events, censored, float(n_total))
    scale = float(n_total - 1)

    r = np.full(n, int(at_risk) - 1, dtype=np.int64)
    r_start = r.copy()
    acc = np.ones(n)
    last = np.full(n, scale)
    loo = np.empty((n, m), dtype=np.float64)
    for j in range(m):
        here = bins == j
        d_j = events[j] - (here & is_event)
        c_j = censored[j] - (here & ~is_event)
        alive = r > 0
        num = r - d_j
        same = num == r_start
        safe_start = np.where(alive, r_start, 1)
        val = np.where(same, acc * scale, (acc * scale * num) / safe_start)
        val = np.where(alive, val, last)
        loo[:, j] = val
        last = val
        nxt = num - c_j
        close = alive & (c_j > 0) & (nxt > 0)
        acc = np.where(close & ~same, (acc * num) / safe_start, acc)
        r_start = np.where(close, nxt, r_start)
        r = np.where(alive, nxt, r)
    return full[None, :] - loo


def cindex_counts(surv, times, events, time_index):
    """Count concordant, tied and comparable pairs for the Antolini C-index.

    ``time_index[i]`` is the grid column used to read predictions at
    ``times[i]``; -1 means before the first grid point (survival 1).
    Returns integer counts ``(concordant, ties, comparable)``.
    """
    surv = np.asarray(surv, dtype=np.float64)
    times = np.asarray(times, dtype=np.float64)
    concordant = ties = comparable = 0
    for i in np.flatnonzero(np.asarray(events, dtype=bool)):
        later = times > times[i]
        n_later = int(later.sum())
        if n_later == 0:
            continue
        comparable += n_later
        k = time_index[i]
        if k < 0:
            ties += n_later
            continue
        own = surv[i, k]
        others = surv[later, k]
        concordant += int((own < others).sum())
        ties += int((own == others).sum())
    return concordant, ties, comparable
