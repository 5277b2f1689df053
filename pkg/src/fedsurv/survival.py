"""Grouped Kaplan-Meier estimation and jackknife pseudo values.

Everything here works on a fixed :class:`TimeGrid`. Subjects are binned into
half-open intervals ``(t_{j-1}, t_j]`` with ``t_0 = 0``; a subject observed
after the last grid point stays in the risk set for the whole grid.

The per-bin counts in a :class:`PartialMatrix` are sufficient to rebuild the
product-limit curve, which is what makes the federated pseudo-value exchange
possible: clients only ever share those counts.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from . import kernels
from .errors import DomainError, ProtocolError


@dataclass(frozen=True)
class SurvivalRecord:
    """One subject: covariates, observed time ``min(T, C)`` and event flag."""

    covariates: tuple
    time: float
    event: bool

    def __post_init__(self):
        t = float(self.time)
        if not math.isfinite(t) or t < 0:
            raise DomainError(f"observed time must be finite and >= 0, got {self.time!r}")
        object.__setattr__(self, "time", t)
        object.__setattr__(self, "event", bool(self.event))
        object.__setattr__(self, "covariates", tuple(float(v) for v in self.covariates))


class SurvivalData:
    """Columnar storage for a set of survival records.

    Parameters
    ----------
    covariates : array_like, shape (n, p)
    time : array_like, shape (n,)
        Observed times, finite and nonnegative.
    event : array_like, shape (n,)
        True where the event was observed, False where censored.
    """

    def __init__(self, covariates, time, event):
        time = np.asarray(time, dtype=np.float64).reshape(-1)
        n = time.shape[0]
        covariates = np.asarray(covariates, dtype=np.float64)
        if covariates.ndim == 1 and n == 0:
            covariates = covariates.reshape(0, 0)
        if covariates.ndim != 2 or covariates.shape[0] != n:
            raise DomainError(
                f"covariates must have shape (n, p) with n={n}, got {covariates.shape}"
            )
        event = np.asarray(event)
        if event.shape != (n,):
            raise DomainError(f"event must have shape ({n},), got {event.shape}")
        if event.dtype != bool:
            if not np.isin(event, (0, 1)).all():
                raise DomainError("event indicators must be 0/1")
            event = event.astype(bool)
        if not np.isfinite(time).all() or (time < 0).any():
            raise DomainError("observed times must be finite and >= 0")
        self.covariates = covariates
        self.time = time
        self.event = event

    @classmethod
    def from_records(cls, records: Iterable[SurvivalRecord], p=None) -> "SurvivalData":
        records = list(records)
        if not records:
            return cls(np.empty((0, p or 0)), np.empty(0), np.empty(0, dtype=bool))
        widths = {len(r.covariates) for r in records}
        if len(widths) != 1:
            raise DomainError(f"records disagree on covariate length: {sorted(widths)}")
        return cls(
            np.array([r.covariates for r in records], dtype=np.float64),
            np.array([r.time for r in records], dtype=np.float64),
            np.array([r.event for r in records], dtype=bool),
        )

    @classmethod
    def concat(cls, parts: Sequence["SurvivalData"]) -> "SurvivalData":
        return cls(
            np.concatenate([d.covariates for d in parts], axis=0),
            np.concatenate([d.time for d in parts]),
            np.concatenate([d.event for d in parts]),
        )

    @property
    def p(self) -> int:
        return self.covariates.shape[1]

    def __len__(self):
        return self.time.shape[0]

    def __getitem__(self, key):
        if isinstance(key, (int, np.integer)):
            return SurvivalRecord(
                tuple(self.covariates[key]), float(self.time[key]), bool(self.event[key])
            )
        return SurvivalData(self.covariates[key], self.time[key], self.event[key])

    def records(self) -> list[SurvivalRecord]:
        return [self[i] for i in range(len(self))]

    def __repr__(self):
        return f"SurvivalData(n={len(self)}, p={self.p}, events={int(self.event.sum())})"


def as_data(records) -> SurvivalData:
    """Accept either :class:`SurvivalData` or an iterable of records."""
    if isinstance(records, SurvivalData):
        return records
    if isinstance(records, SurvivalRecord):
        return SurvivalData.from_records([records])
    return SurvivalData.from_records(records)


@dataclass(frozen=True)
class TimeGrid:
    """Strictly increasing, positive evaluation times ``t_1 < ... < t_m``."""

    points: tuple

    def __post_init__(self):
        pts = tuple(float(t) for t in self.points)
        if not pts:
            raise DomainError("a time grid needs at least one point")
        if not all(math.isfinite(t) and t > 0 for t in pts):
            raise DomainError(f"grid points must be finite and positive: {pts}")
        if any(b <= a for a, b in zip(pts, pts[1:])):
            raise DomainError(f"grid points must be strictly increasing: {pts}")
        object.__setattr__(self, "points", pts)

    @property
    def m(self) -> int:
        return len(self.points)

    def __len__(self):
        return len(self.points)

    def as_array(self) -> np.ndarray:
        return np.array(self.points, dtype=np.float64)


@dataclass(frozen=True)
class PartialMatrix:
    """Per-bin counts: subjects at risk before ``t_1``, events and censorings.

    Counts are Python ints so that aggregation across clients is exact.
    """

    grid: TimeGrid
    at_risk_initial: int
    events: tuple
    censored: tuple

    def __post_init__(self):
        events = tuple(int(v) for v in self.events)
        censored = tuple(int(v) for v in self.censored)
        r0 = int(self.at_risk_initial)
        object.__setattr__(self, "events", events)
        object.__setattr__(self, "censored", censored)
        object.__setattr__(self, "at_risk_initial", r0)
        m = self.grid.m
        if len(events) != m or len(censored) != m:
            raise DomainError(f"events/censored must have length {m}")
        if r0 < 0 or min(events) < 0 or min(censored) < 0:
            raise DomainError("counts must be nonnegative")
        r = r0
        for d, c in zip(events, censored):
            if d + c > r:
                raise DomainError("risk-set recursion went negative")
            r -= d + c

    @property
    def at_risk(self) -> np.ndarray:
        """Risk-set size ``r_j`` at each grid point from the recursion."""
        spent = np.concatenate([[0], np.cumsum(np.add(self.events, self.censored))[:-1]])
        return self.at_risk_initial - spent

    def to_dict(self) -> dict:
        return {
            "grid": list(self.grid.points),
            "at_risk_initial": self.at_risk_initial,
            "events": list(self.events),
            "censored": list(self.censored),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "PartialMatrix":
        return cls(TimeGrid(tuple(doc["grid"])), doc["at_risk_initial"],
                   tuple(doc["events"]), tuple(doc["censored"]))


@dataclass(frozen=True)
class KMCurve:
    """Survival probabilities evaluated at each grid point."""

    grid: TimeGrid
    survival: np.ndarray = field(repr=False)

    def __post_init__(self):
        s = np.array(self.survival, dtype=np.float64)
        s.setflags(write=False)
        object.__setattr__(self, "survival", s)

    def at(self, time: float) -> float:
        """Step-interpolated value; 1 before ``t_1``."""
        k = int(np.searchsorted(self.grid.as_array(), time, side="right")) - 1
        return 1.0 if k < 0 else float(self.survival[k])


@dataclass(frozen=True)
class PseudoValueMatrix:
    """Row ``i`` holds subject ``i``'s pseudo values at every grid point."""

    grid: TimeGrid
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        v = np.array(self.values, dtype=np.float64)
        if v.ndim != 2 or v.shape[1] != self.grid.m:
            raise DomainError(f"pseudo values must have shape (n, {self.grid.m})")
        if not np.isfinite(v).all():
            raise DomainError("pseudo values must be finite")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    def __len__(self):
        return self.values.shape[0]


def bin_index(time: float, grid: TimeGrid):
    """1-based bin ``j`` with ``time`` in ``(t_{j-1}, t_j]``, or None past ``t_m``.

    >>> bin_index(2.0, TimeGrid((2, 4, 5)))
    1
    >>> bin_index(6.0, TimeGrid((2, 4, 5))) is None
    True
    """
    t = float(time)
    if not math.isfinite(t) or t < 0:
        raise DomainError(f"time must be finite and >= 0, got {time!r}")
    j = int(np.searchsorted(grid.as_array(), t, side="left"))
    return None if j == grid.m else j + 1


def _bins(times: np.ndarray, grid: TimeGrid) -> np.ndarray:
    # 0-based bins; overflow maps to m
    return np.searchsorted(grid.as_array(), times, side="left").astype(np.int64)


def _counts(data: SurvivalData, grid: TimeGrid, event: np.ndarray):
    bins = _bins(data.time, grid)
    m = grid.m
    d = np.bincount(bins[event], minlength=m + 1)[:m]
    c = np.bincount(bins[~event], minlength=m + 1)[:m]
    return d, c


def build_partial_matrix(records, grid: TimeGrid) -> PartialMatrix:
    """Count subjects at risk, events and censorings per grid bin."""
    data = as_data(records)
    if len(data) == 0:
        raise DomainError("a partial matrix needs at least one subject")
    d, c = _counts(data, grid, data.event)
    return PartialMatrix(grid, len(data), tuple(d.tolist()), tuple(c.tolist()))


def aggregate_partial_matrices(matrices: Sequence[PartialMatrix]) -> PartialMatrix:
    """Elementwise sum of matrices sharing one grid."""
    matrices = list(matrices)
    if not matrices:
        raise DomainError("nothing to aggregate")
    grid = matrices[0].grid
    for mat in matrices[1:]:
        if mat.grid != grid:
            raise ProtocolError("partial matrices were built on different grids")
    m = grid.m
    return PartialMatrix(
        grid,
        sum(mat.at_risk_initial for mat in matrices),
        tuple(sum(mat.events[j] for mat in matrices) for j in range(m)),
        tuple(sum(mat.censored[j] for mat in matrices) for j in range(m)),
    )


def km_from_partial_matrix(matrix: PartialMatrix) -> KMCurve:
    """Product-limit estimate ``prod_{l<=j} (r_l - d_l) / r_l``.

    A bin with an empty risk set contributes a factor of one, so the curve is
    held at its last value once everybody has left.
    """
    s = kernels.scaled_km(matrix.at_risk_initial, np.array(matrix.events, dtype=np.int64),
                          np.array(matrix.censored, dtype=np.int64), 1.0)
    return KMCurve(matrix.grid, s)


def leave_one_out_matrix(matrix: PartialMatrix, record: SurvivalRecord) -> PartialMatrix:
    """Remove one subject's contribution from ``matrix``.

    Only the bin holding the subject's time is decremented; a subject past the
    last grid point only leaves the initial risk set.
    """
    j = bin_index(record.time, matrix.grid)
    events = list(matrix.events)
    censored = list(matrix.censored)
    if j is not None:
        target = events if record.event else censored
        if target[j - 1] < 1:
            raise ProtocolError(f"record at time {record.time} is not counted in bin {j}")
        target[j - 1] -= 1
    if matrix.at_risk_initial < 1:
        raise ProtocolError("record is not represented in the matrix")
    return PartialMatrix(matrix.grid, matrix.at_risk_initial - 1, tuple(events), tuple(censored))


def pseudo_values(global_matrix: PartialMatrix, client_records, total_n: int) -> PseudoValueMatrix:
    """Jackknife pseudo values ``N * S(t) - (N - 1) * S^{-i}(t)`` for a client.

    ``global_matrix`` is the pooled partial matrix across all clients and
    ``total_n`` the pooled sample size. The leave-one-out curve for each of
    the client's subjects is rebuilt from the pooled counts, so the result
    equals the centralized jackknife on the pooled data.
    """
    data = as_data(client_records)
    if total_n != global_matrix.at_risk_initial:
        raise ProtocolError(
            f"total_n={total_n} does not match the pooled risk set "
            f"{global_matrix.at_risk_initial}"
        )
    grid = global_matrix.grid
    if len(data) > total_n:
        raise ProtocolError("client holds more subjects than the pooled total")
    d_local, c_local = _counts(data, grid, data.event)
    if (d_local > np.array(global_matrix.events)).any() or (
        c_local > np.array(global_matrix.censored)
    ).any():
        raise ProtocolError("client records are not represented in the global matrix")
    values = kernels.pseudo_values(
        global_matrix.at_risk_initial,
        np.array(global_matrix.events, dtype=np.int64),
        np.array(global_matrix.censored, dtype=np.int64),
        _bins(data.time, grid),
        data.event,
        total_n,
    )
    return PseudoValueMatrix(grid, values.reshape(len(data), grid.m))


def censoring_km(records, grid: TimeGrid) -> KMCurve:
    """Kaplan-Meier estimate of the censoring distribution ``G``."""
    data = as_data(records)
    flipped = SurvivalData(data.covariates, data.time, ~data.event)
    return km_from_partial_matrix(build_partial_matrix(flipped, grid))
