"""Discrimination and calibration metrics for predicted survival curves.

Predictions exist only at grid points; between them a curve is read with a
right-continuous step (value at the last grid point not after the query
time), and it equals 1 before the first grid point.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import DomainError, UndefinedMetricError
from .survival import KMCurve, TimeGrid, as_data, censoring_km

IPCW_FLOOR = 1e-6


@dataclass(frozen=True)
class PredictedCurves:
    """Predicted ``S(t_j | x_i)`` for ``n`` subjects on a grid."""

    grid: TimeGrid
    survival: np.ndarray = field(repr=False)

    def __post_init__(self):
        s = np.array(self.survival, dtype=np.float64)
        if s.ndim != 2 or s.shape[1] != self.grid.m:
            raise DomainError(f"survival must have shape (n, {self.grid.m}), got {s.shape}")
        if not ((s >= 0) & (s <= 1)).all():
            raise DomainError("predicted survival must lie in [0, 1]")
        s.setflags(write=False)
        object.__setattr__(self, "survival", s)

    def __len__(self):
        return self.survival.shape[0]


def _column(grid: TimeGrid, times) -> np.ndarray:
    # grid column at or before each time; -1 before the first point
    return np.searchsorted(grid.as_array(), times, side="right").astype(np.int64) - 1


def curve_at(curves: PredictedCurves, subject: int, time: float) -> float:
    if time < 0:
        raise DomainError("time must be >= 0")
    k = int(_column(curves.grid, [time])[0])
    return 1.0 if k < 0 else float(curves.survival[subject, k])


def td_cindex(curves: PredictedCurves, records) -> float:
    """Antolini's time-dependent concordance index.

    A pair is comparable when ``Y_i < Y_j`` and subject ``i`` had the event.
    It is concordant when ``S(Y_i | x_i) < S(Y_i | x_j)``; ties count one half.
    """
    data = as_data(records)
    if len(data) != len(curves):
        raise DomainError("curves and records differ in length")
    concordant, ties, comparable = kernels.cindex_counts(
        curves.survival, data.time, data.event, _column(curves.grid, data.time)
    )
    if comparable == 0:
        raise UndefinedMetricError("no comparable pairs")
    return (concordant + 0.5 * ties) / comparable


def brier_ipcw(curves: PredictedCurves, records, censor_curve: KMCurve, t: float) -> float:
    """Graf's inverse-probability-of-censoring weighted Brier score at ``t``.

    Subjects with an event by ``t`` are weighted by ``1 / G(Y_i-)``, subjects
    still at risk by ``1 / G(t)``; subjects censored by ``t`` drop out. The
    left limit ``G(u-)`` is read at the last grid point strictly before ``u``.
    Weights are clipped below at ``IPCW_FLOOR``.
    """
    data = as_data(records)
    grid = curves.grid
    pts = grid.as_array()
    k = int(np.searchsorted(pts, t))
    if k == grid.m or pts[k] != t:
        raise DomainError(f"brier score is evaluated at grid points only, got {t}")
    g = np.concatenate([[1.0], censor_curve.survival])
    g_t = max(g[k + 1], IPCW_FLOOR)
    # index into g: 0 means no grid point strictly before Y_i
    before = np.searchsorted(pts, data.time, side="left")
    g_minus = np.maximum(g[before], IPCW_FLOOR)
    pred = curves.survival[:, k]
    died = (data.time <= t) & data.event
    alive = data.time > t
    terms = np.where(died, pred**2 / g_minus, 0.0) + np.where(alive, (1.0 - pred) ** 2 / g_t, 0.0)
    return float(terms.mean())


def brier_curve(curves: PredictedCurves, records, censor_curve: KMCurve = None) -> np.ndarray:
    """IPCW Brier score at every grid point."""
    data = as_data(records)
    if censor_curve is None:
        censor_curve = censoring_km(data, curves.grid)
    return np.array([brier_ipcw(curves, data, censor_curve, t) for t in curves.grid.points])


def integrated_brier(curves: PredictedCurves, records) -> float:
    """Trapezoidal average of the IPCW Brier score over ``[t_1, t_m]``."""
    grid = curves.grid
    if grid.m < 2:
        raise UndefinedMetricError("integrated brier score needs at least two grid points")
    pts = grid.as_array()
    scores = brier_curve(curves, records)
    return float(np.trapezoid(scores, pts) / (pts[-1] - pts[0]))
