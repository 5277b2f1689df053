"""Command-line driver: ``generate``, ``run``, ``evaluate`` and ``pseudo``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, replace
from pathlib import Path

from . import datagen, experiment
from .errors import DomainError, FedSurvError, ProtocolError, TrainingError
from .protocol import (FederationConfig, InProcessTransport, ServerState, make_clients,
                       run_grid_negotiation, run_pseudo_phase)
from .seeding import derive_rng

logger = logging.getLogger("fedsurv")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_TRAINING = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad usage; 2 is reserved for data errors here
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def parse_assignments(items) -> dict:
    """``["train.batch_size=64", "mode=centralized"]`` -> nested dict."""
    out = {}
    for item in items or ():
        key, sep, value = item.partition("=")
        if not sep or not key:
            raise UsageError(f"--set expects key=value, got {item!r}")
        node = out
        *parents, leaf = key.split(".")
        for part in parents:
            node = node.setdefault(part, {})
        node[leaf] = _parse_value(value)
    return out


def _load_config_file(path) -> dict:
    if path is None:
        return {}
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise DomainError(f"{path}: invalid JSON config: {exc}") from None
    if not isinstance(doc, dict):
        raise DomainError(f"{path}: config must be a JSON object")
    return doc


def _write_json(path, doc):
    experiment.atomic_write(path, json.dumps(doc, indent=2, sort_keys=True) + "\n")


# -- generate -----------------------------------------------------------------

def cmd_generate(args) -> int:
    doc = experiment.deep_merge(_load_config_file(args.config).get("dataset", {}),
                                parse_assignments(args.set))
    doc.pop("kind", None)
    for key, value in (("n", args.n), ("p", args.p), ("seed", args.seed)):
        if value is not None:
            doc[key] = value
    probs = args.censor_prob or [doc.get("censor_prob", 0.25)]
    base = datagen.SynthConfig(**{**doc, "censor_prob": probs[0]})
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    full = datagen.generate_uncensored(base, derive_rng(base.seed, "data"))
    datagen.write_csv(full, out / "uncensored.csv")
    files = {"uncensored": "uncensored.csv"}
    for prob in probs:
        cc = datagen.apply_case_censoring(full, prob, derive_rng(base.seed, "censor"))
        name = f"cc{round(prob * 100)}.csv"
        datagen.write_csv(cc, out / name)
        files[name[:-4]] = name
        logger.info("%s: %d rows, %d censored", name, len(cc), int((~cc.event).sum()))
    config = asdict(replace(base, censor_prob=probs[0]))
    config.pop("censor_prob")
    _write_json(out / "manifest.json",
                {"config": config, "censor_probs": list(probs), "files": files})
    print(f"wrote {len(files)} datasets to {out}")
    return EXIT_OK


# -- run ----------------------------------------------------------------------

def _run_overrides(args) -> dict:
    doc = parse_assignments(args.set)
    for key, value in (("seed", args.seed), ("mode", args.mode), ("out", args.out),
                       ("repeats", args.repeats)):
        if value is not None:
            doc[key] = value
    if args.dump_messages:
        doc["dump_messages"] = True
    if args.data is not None:
        doc["dataset"] = {"kind": "csv", "path": args.data}
        doc["name"] = Path(args.data).stem
    if args.workers is not None:
        doc.setdefault("federation", {})["max_workers"] = args.workers
    return doc


def cmd_run(args) -> int:
    config = experiment.resolve_config(args.preset, _load_config_file(args.config),
                                       _run_overrides(args))
    rows, summary, _ = experiment.run_experiment(config)
    print(experiment.format_table([summary]), end="")
    print(f"results in {config.out}")
    return EXIT_OK


# -- evaluate -----------------------------------------------------------------

def cmd_evaluate(args) -> int:
    data = datagen.load_csv(args.data) if args.data else None
    label = Path(args.data).stem if args.data else None
    row = experiment.evaluate_checkpoint(args.checkpoint, data, args.seed, label)
    doc = {"dataset": row.dataset, "seed": row.seed, "cindex": row.cindex, "ibrier": row.ibrier}
    if args.out:
        _write_json(args.out, doc)
    print(json.dumps(doc))
    return EXIT_OK


# -- pseudo -------------------------------------------------------------------

def cmd_pseudo(args) -> int:
    shards = [datagen.load_csv(path) for path in args.shards]
    config = FederationConfig(num_clients=len(shards), participation_fraction=1.0,
                              num_points=args.num_points)
    clients = make_clients([(s, None) for s in shards])
    server = ServerState(config)
    transport = InProcessTransport(record=args.dump_messages)
    grid = run_grid_negotiation(clients, server, transport)
    run_pseudo_phase(clients, server, transport)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    header = ",".join(f"t{j + 1}" for j in range(grid.m))
    for c in clients:
        lines = [header] + [",".join(repr(float(v)) for v in row) for row in c.pseudo.values]
        experiment.atomic_write(out / f"pseudo_{c.client_id}.csv", "\n".join(lines) + "\n")
    _write_json(out / "grid.json", {"grid": list(grid.points),
                                    "total_n": sum(len(s) for s in shards),
                                    "shards": [str(p) for p in args.shards]})
    if args.dump_messages:
        transport.dump(out / "messages.jsonl")
    print(f"wrote pseudo values for {len(clients)} clients on a {grid.m}-point grid to {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="fedsurv", description="Federated survival analysis with "
                     "jackknife pseudo values.")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("generate", help="write synthetic Weibull-Cox datasets as CSV")
    g.add_argument("--config", help="JSON config; its 'dataset' block is used")
    g.add_argument("--seed", type=int)
    g.add_argument("--n", type=int)
    g.add_argument("--p", type=int)
    g.add_argument("--censor-prob", type=float, action="append",
                   help="case-censoring probability; repeat for several variants")
    g.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override a dataset field, e.g. nu=4")
    g.add_argument("--out", default="data")
    g.set_defaults(func=cmd_generate)

    r = sub.add_parser("run", help="repeated-seed centralized or federated experiment")
    r.add_argument("--preset", choices=sorted(experiment.PRESETS))
    r.add_argument("--config", help="JSON experiment config")
    r.add_argument("--seed", type=int, help="base seed; repeat r uses seed + r")
    r.add_argument("--mode", choices=experiment.MODES)
    r.add_argument("--repeats", type=int)
    r.add_argument("--data", help="CSV dataset instead of the synthetic generator")
    r.add_argument("--workers", type=int, help="threads for client-local work")
    r.add_argument("--out")
    r.add_argument("--dump-messages", action="store_true",
                   help="write each seed's message trace as JSONL")
    r.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override any config field, e.g. train.batch_size=128")
    r.set_defaults(func=cmd_run)

    e = sub.add_parser("evaluate", help="recompute test metrics for a checkpoint")
    e.add_argument("checkpoint")
    e.add_argument("--data", help="CSV dataset; defaults to the one recorded in the checkpoint")
    e.add_argument("--seed", type=int, help="split seed; defaults to the checkpoint's")
    e.add_argument("--out", help="write the metrics as JSON")
    e.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("pseudo", help="federated pseudo values over CSV shards")
    p.add_argument("shards", nargs="+", help="one CSV per client")
    p.add_argument("--num-points", type=int, default=8)
    p.add_argument("--out", default="pseudo")
    p.add_argument("--dump-messages", action="store_true")
    p.set_defaults(func=cmd_pseudo)
    return parser


def _exit_code(exc) -> int:
    cause = getattr(exc, "cause", exc)
    if isinstance(cause, (TrainingError, ProtocolError)):
        return EXIT_TRAINING
    if isinstance(cause, (DomainError, OSError, ValueError)):
        return EXIT_DATA
    return EXIT_TRAINING


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"fedsurv: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FedSurvError, experiment.SeedFailure, OSError) as exc:
        print(f"fedsurv {args.command}: {exc}", file=sys.stderr)
        return _exit_code(exc)


if __name__ == "__main__":
    sys.exit(main())
