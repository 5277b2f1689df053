"""Synthetic Weibull-Cox survival data, case censoring, client sharding, CSV IO."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass

import numpy as np

from .errors import DomainError, IngestionError
from .seeding import derive_rng
from .survival import SurvivalData

logger = logging.getLogger(__name__)

DEFAULT_GAMMA = (0.5, -0.5, 0.3, -0.3)


def default_beta(p: int) -> tuple:
    """Alternating-sign linear effects ``0.1 * (-1)^q * (1 + q/12)``."""
    return tuple(0.1 * (-1) ** q * (1 + q / 12) for q in range(1, p + 1))


@dataclass(frozen=True)
class SynthConfig:
    n: int = 20000
    p: int = 12
    mu: float = 0.0
    sigma: float = 1.25
    lam: float = 0.1
    nu: float = 6.0
    censor_prob: float = 0.25
    seed: int = 0
    beta: tuple = None
    gamma: tuple = DEFAULT_GAMMA

    def __post_init__(self):
        if self.n < 1 or self.p < 1:
            raise DomainError("n and p must be positive")
        if not (self.sigma > 0 and self.lam > 0 and self.nu > 0):
            raise DomainError("sigma, lam and nu must be positive")
        if not 0 <= self.censor_prob <= 1:
            raise DomainError("censor_prob must lie in [0, 1]")
        beta = default_beta(self.p) if self.beta is None else tuple(map(float, self.beta))
        if len(beta) != self.p:
            raise DomainError(f"beta needs {self.p} coefficients, got {len(beta)}")
        gamma = tuple(map(float, self.gamma))
        if len(gamma) != 4:
            raise DomainError("gamma needs 4 coefficients")
        if self.p < 6 and any(gamma):
            raise DomainError("nonlinear risk terms use the first 6 covariates; set gamma=0 for p<6")
        object.__setattr__(self, "beta", beta)
        object.__setattr__(self, "gamma", gamma)


def risk_score(x: np.ndarray, beta, gamma) -> np.ndarray:
    """``x @ beta + g1 x1 x2 + g2 x3 x4 + g3 x5^2 + g4 x6^2``."""
    x = np.asarray(x, dtype=np.float64)
    g = x @ np.asarray(beta, dtype=np.float64)
    if any(gamma):
        g = (g + gamma[0] * x[:, 0] * x[:, 1] + gamma[1] * x[:, 2] * x[:, 3]
             + gamma[2] * x[:, 4] ** 2 + gamma[3] * x[:, 5] ** 2)
    return g


def weibull_cox_time(u, risk, lam, nu):
    """Inverse-transform draw ``(-ln u / (lam * exp(risk)))^(1/nu)``."""
    return (-np.log(u) / (lam * np.exp(risk))) ** (1.0 / nu)


def _open_unit(rng, size):
    # uniform on (0, 1): random() can return exactly 0
    u = rng.random(size)
    return np.where(u == 0.0, np.nextafter(0.0, 1.0), u)


def generate_uncensored(config: SynthConfig, rng) -> SurvivalData:
    x = rng.normal(config.mu, config.sigma, size=(config.n, config.p))
    g = risk_score(x, config.beta, config.gamma)
    t = weibull_cox_time(_open_unit(rng, config.n), g, config.lam, config.nu)
    return SurvivalData(x, t, np.ones(config.n, dtype=bool))


def apply_case_censoring(data: SurvivalData, censor_prob: float, rng) -> SurvivalData:
    """Censor each subject with probability ``censor_prob``.

    A censored subject's time is multiplied by ``V ~ Uniform(0, 1)`` and its
    event flag cleared.
    """
    if not data.event.all():
        raise DomainError("case censoring expects uncensored input")
    if not 0 <= censor_prob <= 1:
        raise DomainError("censor_prob must lie in [0, 1]")
    n = len(data)
    chosen = rng.random(n) < censor_prob
    shrink = _open_unit(rng, int(chosen.sum()))
    time = data.time.copy()
    time[chosen] *= shrink
    return SurvivalData(data.covariates.copy(), time, ~chosen)


def generate(config: SynthConfig):
    """Uncensored dataset and its case-censored variant under ``config.seed``."""
    full = generate_uncensored(config, derive_rng(config.seed, "data"))
    censored = apply_case_censoring(full, config.censor_prob, derive_rng(config.seed, "censor"))
    return full, censored


def partition_iid(data: SurvivalData, num_clients: int, rng) -> list:
    """Shuffle and deal equal shards; the ``n mod K`` leftover rows are dropped."""
    n = len(data)
    if num_clients < 1:
        raise DomainError("num_clients must be >= 1")
    if num_clients > n:
        raise DomainError(f"cannot split {n} records across {num_clients} clients")
    size = n // num_clients
    dropped = n - size * num_clients
    if dropped:
        logger.info("partition_iid dropped %d remainder rows", dropped)
    order = rng.permutation(n)
    return [data[order[k * size:(k + 1) * size]] for k in range(num_clients)]


def split_fraction(data: SurvivalData, fraction: float, rng):
    """Random ``(first, rest)`` split with ``round(fraction * n)`` rows in ``first``."""
    n = len(data)
    k = int(math.floor(fraction * n + 0.5))
    order = rng.permutation(n)
    return data[np.sort(order[:k])], data[np.sort(order[k:])]


def load_csv(path, duration_column="duration", event_column="event") -> SurvivalData:
    """Read a CSV with a header row; every other column is a covariate."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise IngestionError(f"{path}: missing header row") from None
        for col in (duration_column, event_column):
            if col not in header:
                raise IngestionError(f"{path}: missing column {col!r}")
        t_col = header.index(duration_column)
        e_col = header.index(event_column)
        cov_cols = [k for k in range(len(header)) if k not in (t_col, e_col)]
        xs, ts, es = [], [], []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise IngestionError(f"{path}: row {lineno} has {len(row)} fields, "
                                     f"expected {len(header)}")

            def number(k):
                try:
                    v = float(row[k])
                except ValueError:
                    raise IngestionError(
                        f"{path}: row {lineno}, column {header[k]!r}: not a number: {row[k]!r}"
                    ) from None
                if not math.isfinite(v):
                    raise IngestionError(f"{path}: row {lineno}, column {header[k]!r}: not finite")
                return v

            t = number(t_col)
            if t < 0:
                raise IngestionError(f"{path}: row {lineno}, column {duration_column!r}: "
                                     f"negative duration {t}")
            e = number(e_col)
            if e not in (0.0, 1.0):
                raise IngestionError(f"{path}: row {lineno}, column {event_column!r}: "
                                     f"event must be 0 or 1, got {row[e_col]!r}")
            xs.append([number(k) for k in cov_cols])
            ts.append(t)
            es.append(e == 1.0)
    return SurvivalData(np.array(xs, dtype=np.float64).reshape(len(ts), len(cov_cols)),
                        np.array(ts), np.array(es, dtype=bool))


def write_csv(data: SurvivalData, path, columns=None):
    """Write ``f1..fp, duration, event`` (or the given covariate names)."""
    names = columns or [f"f{k + 1}" for k in range(data.p)]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([*names, "duration", "event"])
        for x, t, e in zip(data.covariates, data.time, data.event):
            w.writerow([*(repr(float(v)) for v in x), repr(float(t)), int(e)])
