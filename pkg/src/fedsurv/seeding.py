"""Deterministic RNG streams keyed by (root seed, purpose, extra keys)."""
import numpy as np

from .errors import DomainError

PURPOSES = {
    "data": 1,
    "censor": 2,
    "split": 3,
    "partition": 4,
    "valid": 5,
    "init": 6,
    "select": 7,
    "train": 8,
}


def derive_rng(seed, purpose, *keys):
    """Return an independent ``Generator`` for ``purpose`` under ``seed``.

    Streams for distinct purposes or keys never share state, so re-running one
    stage (e.g. only client selection for round 7) reproduces it exactly.
    """
    if purpose not in PURPOSES:
        raise DomainError(f"unknown rng purpose {purpose!r}")
    entropy = [int(seed), PURPOSES[purpose], *(int(k) for k in keys)]
    if any(e < 0 for e in entropy):
        raise DomainError("seeds and rng keys must be nonnegative")
    return np.random.default_rng(entropy)


def derive_seed(seed, purpose, *keys):
    """Draw a 63-bit integer seed from a derived stream."""
    return int(derive_rng(seed, purpose, *keys).integers(0, 2**63 - 1))
