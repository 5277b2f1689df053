"""Experiment configuration, repeated-seed runs and result files."""
from __future__ import annotations

import csv
import io
import json
import logging
import os
import tempfile
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import datagen
from .errors import DomainError
from .metrics import integrated_brier, td_cindex
from .model import ModelParams, TrainConfig, predict_curves
from .presets import PRESETS
from .protocol import FederationConfig, InProcessTransport, run_federation
from .seeding import derive_rng
from .survival import SurvivalData, TimeGrid

logger = logging.getLogger(__name__)

MODES = ("centralized", "federated")

DEFAULTS = {
    "name": "experiment",
    "mode": "federated",
    "repeats": 5,
    "seed": 0,
    "test_fraction": 0.2,
    "valid_fraction": 0.2,
    "centralized_epochs": None,
    "out": "results",
    "dump_messages": False,
    "dataset": {"kind": "synthetic"},
    "federation": {},
    "train": {},
}


def deep_merge(base: dict, override: dict) -> dict:
    out = dict(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = deep_merge(out[key], value)
        else:
            out[key] = value
    return out


@dataclass(frozen=True)
class CsvSpec:
    path: str
    duration_column: str = "duration"
    event_column: str = "event"


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: object
    federation: FederationConfig
    mode: str = "federated"
    repeats: int = 5
    seed: int = 0
    name: str = "experiment"
    test_fraction: float = 0.2
    valid_fraction: float = 0.2
    centralized_epochs: int = None
    out: str = "results"
    dump_messages: bool = False

    def __post_init__(self):
        if self.mode not in MODES:
            raise DomainError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.repeats < 1:
            raise DomainError("repeats must be >= 1")
        for frac in (self.test_fraction, self.valid_fraction):
            if not 0 < frac < 1:
                raise DomainError("split fractions must lie in (0, 1)")

    @property
    def model(self) -> TrainConfig:
        return self.federation.local_train

    def seeds(self) -> list:
        return [self.seed + r for r in range(self.repeats)]

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentConfig":
        doc = deep_merge(DEFAULTS, doc)
        ds = dict(doc["dataset"])
        kind = ds.pop("kind", "synthetic")
        if kind == "synthetic":
            for key in ("beta", "gamma"):
                if ds.get(key) is not None:
                    ds[key] = tuple(ds[key])
            dataset = datagen.SynthConfig(**ds)
        elif kind == "csv":
            dataset = CsvSpec(**ds)
        else:
            raise DomainError(f"unknown dataset kind {kind!r}")
        train = dict(doc["train"])
        if "hidden_layers" in train:
            train["hidden_layers"] = tuple(train["hidden_layers"])
        federation = FederationConfig(local_train=TrainConfig(**train), **doc["federation"])
        known = {f.name for f in fields(cls)} - {"dataset", "federation"}
        unknown = set(doc) - known - {"dataset", "federation", "train"}
        if unknown:
            raise DomainError(f"unknown config keys: {sorted(unknown)}")
        return cls(dataset=dataset, federation=federation,
                   **{k: v for k, v in doc.items() if k in known})

    def to_dict(self) -> dict:
        fed = asdict(self.federation)
        train = fed.pop("local_train")
        train["hidden_layers"] = list(train["hidden_layers"])
        train.pop("seed")
        if isinstance(self.dataset, datagen.SynthConfig):
            ds = {"kind": "synthetic", **asdict(self.dataset)}
            ds["beta"], ds["gamma"] = list(ds["beta"]), list(ds["gamma"])
        else:
            ds = {"kind": "csv", **asdict(self.dataset)}
        out = {f.name: getattr(self, f.name) for f in fields(self)
               if f.name not in ("dataset", "federation")}
        return {**out, "dataset": ds, "federation": fed, "train": train}


def resolve_config(preset=None, file_doc=None, overrides=None) -> ExperimentConfig:
    """Merge defaults < preset < config file < command-line overrides."""
    doc = {}
    if preset is not None:
        if preset not in PRESETS:
            raise DomainError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
        doc = deep_merge(doc, PRESETS[preset])
    if file_doc:
        doc = deep_merge(doc, file_doc)
    if overrides:
        doc = deep_merge(doc, overrides)
    return ExperimentConfig.from_dict(doc)


def load_dataset(config: ExperimentConfig) -> SurvivalData:
    if isinstance(config.dataset, CsvSpec):
        spec = config.dataset
        return datagen.load_csv(spec.path, spec.duration_column, spec.event_column)
    return datagen.generate(config.dataset)[1]


def dataset_name(config: ExperimentConfig) -> str:
    if isinstance(config.dataset, CsvSpec):
        return Path(config.dataset.path).stem
    return config.name


def holdout_split(data: SurvivalData, seed: int, test_fraction: float):
    """``(train, test)`` for one repeat seed."""
    return datagen.split_fraction(data, 1.0 - test_fraction, derive_rng(seed, "split"))


@dataclass
class ResultRow:
    dataset: str
    mode: str
    seed: int
    cindex: float
    ibrier: float
    wall_time: float
    rounds: int
    epochs: int

    ROW_FIELDS = ("dataset", "mode", "seed", "cindex", "ibrier", "rounds", "epochs")


@dataclass
class SeedResult:
    row: ResultRow
    params: ModelParams
    grid: TimeGrid
    log: list = field(default_factory=list)
    transport: InProcessTransport = None


def federation_for(config: ExperimentConfig, seed: int) -> FederationConfig:
    fed = replace(config.federation, seed=seed)
    if config.mode == "centralized":
        epochs = config.centralized_epochs
        if epochs is None:
            epochs = fed.rounds * fed.local_train.max_epochs
        fed = replace(fed, num_clients=1, participation_fraction=1.0, rounds=1,
                      local_train=replace(fed.local_train, max_epochs=epochs))
    return fed


def evaluate_params(params: ModelParams, grid: TimeGrid, test: SurvivalData):
    if params.layer_dims[0] != test.p:
        raise DomainError(f"model expects {params.layer_dims[0]} covariates, data has {test.p}")
    curves = predict_curves(params, test.covariates, grid)
    return td_cindex(curves, test), integrated_brier(curves, test)


def run_seed(config: ExperimentConfig, data: SurvivalData, seed: int) -> SeedResult:
    """Split, shard, derive pseudo values, train and evaluate for one seed.

    Centralized mode is the same pipeline with a single client that holds the
    whole training split and trains once for ``centralized_epochs``.
    """
    start = time.perf_counter()
    fed = federation_for(config, seed)
    train, test = holdout_split(data, seed, config.test_fraction)
    shards = datagen.partition_iid(train, fed.num_clients, derive_rng(seed, "partition"))
    pairs = [datagen.split_fraction(s, 1.0 - config.valid_fraction, derive_rng(seed, "valid", k))
             for k, s in enumerate(shards)]
    transport = InProcessTransport(record=bool(config.dump_messages))
    params, log, clients, server = run_federation(pairs, fed, transport)
    cindex, ibrier = evaluate_params(params, server.grid, test)
    epochs = sum(sum(entry.local_epochs) for entry in log)
    row = ResultRow(dataset_name(config), config.mode, seed, cindex, ibrier,
                    time.perf_counter() - start, fed.rounds, epochs)
    logger.info("%s %s seed %d: C-index %.4f, iBrier %.4f (%.1fs)", row.dataset, row.mode,
                seed, cindex, ibrier, row.wall_time)
    return SeedResult(row, params, server.grid, log, transport)


def summarize(rows) -> dict:
    """Mean and population standard deviation of the per-seed metrics."""
    c = np.array([r.cindex for r in rows])
    b = np.array([r.ibrier for r in rows])
    return {
        "dataset": rows[0].dataset,
        "mode": rows[0].mode,
        "n_seeds": len(rows),
        "cindex_mean": float(c.mean()),
        "cindex_std": float(c.std()),
        "ibrier_mean": float(b.mean()),
        "ibrier_std": float(b.std()),
    }


def format_table(summaries) -> str:
    """Aligned ``metric x mode`` table per dataset, ``mean (std)`` cells."""
    by_ds = {}
    for s in summaries:
        by_ds.setdefault(s["dataset"], {})[s["mode"]] = s
    modes = [m for m in MODES if any(m in v for v in by_ds.values())]
    header = ["Dataset", "Metric", *(m.capitalize() for m in modes)]
    lines = []
    for ds, entry in by_ds.items():
        for metric, key in (("Cindex", "cindex"), ("iBrier", "ibrier")):
            cells = []
            for m in modes:
                s = entry.get(m)
                cells.append(f"{s[key + '_mean']:.3f} ({s[key + '_std']:.3f})" if s else "-")
            lines.append([ds, metric, *cells])
    widths = [max(len(str(r[k])) for r in [header, *lines]) for k in range(len(header))]
    fmt = "  ".join(f"{{:<{w}}}" for w in widths)
    return "\n".join(fmt.format(*r) for r in [header, *lines]) + "\n"


def atomic_write(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _fmt(v):
    return repr(v) if isinstance(v, float) else v


def rows_csv(rows) -> str:
    return _csv_text(ResultRow.ROW_FIELDS,
                     [[_fmt(getattr(r, f)) for f in ResultRow.ROW_FIELDS] for r in rows])


def summary_csv(summaries) -> str:
    keys = list(summaries[0])
    return _csv_text(keys, [[_fmt(s[k]) for k in keys] for s in summaries])


def checkpoint_doc(config: ExperimentConfig, result: SeedResult) -> dict:
    return {
        "params": result.params.to_dict(),
        "grid": list(result.grid.points),
        "seed": result.row.seed,
        "test_fraction": config.test_fraction,
        "dataset": config.to_dict()["dataset"],
        "metrics": {"cindex": result.row.cindex, "ibrier": result.row.ibrier},
    }


def run_experiment(config: ExperimentConfig, out_dir=None, data: SurvivalData = None):
    """Run every repeat seed, write result files under ``out_dir``.

    Files: ``rows.csv`` (per-seed metrics), ``timings.csv`` (wall times),
    ``summary.csv`` and ``summary.txt``, ``config.json``,
    ``checkpoints/seed<k>.json``, ``logs/seed<k>.json`` and, when message
    dumping is on, ``messages/seed<k>.jsonl``.

    A failure in any seed is re-raised with the seed attached.
    """
    out = Path(out_dir or config.out)
    data = load_dataset(config) if data is None else data
    atomic_write(out / "config.json", json.dumps(config.to_dict(), indent=2, sort_keys=True))
    results = []
    for seed in config.seeds():
        try:
            res = run_seed(config, data, seed)
        except Exception as exc:
            raise SeedFailure(seed, exc) from exc
        results.append(res)
        atomic_write(out / "checkpoints" / f"seed{seed}.json",
                     json.dumps(checkpoint_doc(config, res)))
        atomic_write(out / "logs" / f"seed{seed}.json",
                     json.dumps([e.to_dict() for e in res.log], indent=1))
        if config.dump_messages:
            res.transport.dump(out / "messages" / f"seed{seed}.jsonl")
    rows = [r.row for r in results]
    summary = summarize(rows)
    atomic_write(out / "rows.csv", rows_csv(rows))
    atomic_write(out / "timings.csv",
                 _csv_text(["seed", "wall_time"], [[r.seed, _fmt(r.wall_time)] for r in rows]))
    atomic_write(out / "summary.csv", summary_csv([summary]))
    atomic_write(out / "summary.txt", format_table([summary]))
    return rows, summary, results


class SeedFailure(RuntimeError):
    def __init__(self, seed, cause):
        super().__init__(f"seed {seed} failed: {cause}")
        self.seed = seed
        self.cause = cause


def load_checkpoint(path) -> tuple:
    with open(path) as fh:
        doc = json.load(fh)
    return ModelParams.from_dict(doc["params"]), TimeGrid(tuple(doc["grid"])), doc


def evaluate_checkpoint(path, data: SurvivalData = None, seed=None, dataset_label=None):
    """Recompute test metrics for a saved model on its held-out split."""
    params, grid, doc = load_checkpoint(path)
    seed = doc["seed"] if seed is None else seed
    if data is None:
        ds = dict(doc["dataset"])
        kind = ds.pop("kind")
        if kind == "csv":
            data = datagen.load_csv(ds["path"], ds["duration_column"], ds["event_column"])
        else:
            ds["beta"], ds["gamma"] = tuple(ds["beta"]), tuple(ds["gamma"])
            data = datagen.generate(datagen.SynthConfig(**ds))[1]
    _, test = holdout_split(data, seed, doc.get("test_fraction", 0.2))
    start = time.perf_counter()
    cindex, ibrier = evaluate_params(params, grid, test)
    return ResultRow(dataset_label or "checkpoint", "evaluate", seed, cindex, ibrier,
                     time.perf_counter() - start, 0, 0)
