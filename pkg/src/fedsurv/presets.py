"""Named experiment configurations.

``cc*-desk`` presets are laptop-sized versions of the case-censoring
experiments; ``cc*`` presets use the full published sizes (20000 subjects,
10 clients, 50 rounds, up to 1000 local epochs).
"""

_DESK = {
    "repeats": 3,
    "centralized_epochs": 600,
    "dataset": {"kind": "synthetic", "n": 4000},
    "federation": {"num_clients": 5, "participation_fraction": 0.75, "rounds": 20},
    "train": {"max_epochs": 30, "patience": 50, "batch_size": 64},
}

_FULL = {
    "repeats": 5,
    "centralized_epochs": 1000,
    "dataset": {"kind": "synthetic", "n": 20000},
    "federation": {"num_clients": 10, "participation_fraction": 0.75, "rounds": 50},
    "train": {"max_epochs": 1000, "patience": 50, "batch_size": 256},
}


def _with_censoring(base, name, prob):
    out = {k: (dict(v) if isinstance(v, dict) else v) for k, v in base.items()}
    out["name"] = name
    out["dataset"]["censor_prob"] = prob
    return out


PRESETS = {}
for _pct in (25, 50, 75):
    PRESETS[f"cc{_pct}-desk"] = _with_censoring(_DESK, f"cc{_pct}-desk", _pct / 100)
    PRESETS[f"cc{_pct}"] = _with_censoring(_FULL, f"cc{_pct}", _pct / 100)
