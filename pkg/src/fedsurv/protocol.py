"""Federated pseudo-value protocol over an in-process message transport.

Three phases, each separated by a barrier at the server:

1. Horizon negotiation: clients report their largest observed time, the
   server picks ``T = min`` of those and broadcasts the evaluation grid.
2. Pseudo values: clients upload per-bin counts, the server sums them and
   broadcasts the pooled matrix; each client derives its subjects' jackknife
   pseudo values locally.
3. Training: each round a random subset of clients trains the broadcast
   model on (covariates -> pseudo values) and the server averages the
   returned weights.

Every message crosses the client/server boundary as canonical JSON text, so
the trace is exactly what a networked deployment would transmit.
"""
from __future__ import annotations

import enum
import hashlib
import json
import logging
from collections import defaultdict, deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

import jsonschema
import numpy as np

from . import kernels, metrics, survival
from .errors import DomainError, ProtocolError
from .model import ModelParams, TrainConfig, TrainHistory, init_params, predict_curves, train_local
from .seeding import derive_rng, derive_seed
from .survival import PartialMatrix, PseudoValueMatrix, SurvivalData, TimeGrid

logger = logging.getLogger(__name__)

SERVER = "server"


def client_address(client_id: int) -> str:
    return f"client:{client_id}"


# -- messages -----------------------------------------------------------------

@dataclass(frozen=True)
class MaxTimeReport:
    client_id: int
    max_time: float

    def to_dict(self):
        return {"client_id": self.client_id, "max_time": float(self.max_time)}

    @classmethod
    def from_dict(cls, d):
        return cls(int(d["client_id"]), float(d["max_time"]))


@dataclass(frozen=True)
class GridBroadcast:
    grid: TimeGrid

    def to_dict(self):
        return {"grid": list(self.grid.points)}

    @classmethod
    def from_dict(cls, d):
        return cls(TimeGrid(tuple(d["grid"])))


@dataclass(frozen=True)
class PartialMatrixUpload:
    client_id: int
    matrix: PartialMatrix

    def to_dict(self):
        return {"client_id": self.client_id, "matrix": self.matrix.to_dict()}

    @classmethod
    def from_dict(cls, d):
        return cls(int(d["client_id"]), PartialMatrix.from_dict(d["matrix"]))


@dataclass(frozen=True)
class GlobalMatrixBroadcast:
    matrix: PartialMatrix
    total_n: int

    def to_dict(self):
        return {"matrix": self.matrix.to_dict(), "total_n": self.total_n}

    @classmethod
    def from_dict(cls, d):
        return cls(PartialMatrix.from_dict(d["matrix"]), int(d["total_n"]))


@dataclass(frozen=True, eq=False)
class ModelBroadcast:
    round: int
    params: ModelParams

    def to_dict(self):
        return {"round": self.round, "params": self.params.to_dict()}

    @classmethod
    def from_dict(cls, d):
        return cls(int(d["round"]), ModelParams.from_dict(d["params"]))


@dataclass(frozen=True, eq=False)
class ModelUpdateUpload:
    round: int
    client_id: int
    params: ModelParams

    def to_dict(self):
        return {"round": self.round, "client_id": self.client_id,
                "params": self.params.to_dict()}

    @classmethod
    def from_dict(cls, d):
        return cls(int(d["round"]), int(d["client_id"]), ModelParams.from_dict(d["params"]))


MESSAGE_TYPES = {cls.__name__: cls for cls in (
    MaxTimeReport, GridBroadcast, PartialMatrixUpload, GlobalMatrixBroadcast,
    ModelBroadcast, ModelUpdateUpload,
)}


def message_to_dict(message) -> dict:
    name = type(message).__name__
    if name not in MESSAGE_TYPES:
        raise ProtocolError(f"not a protocol message: {name}")
    return {"type": name, **message.to_dict()}


def encode(message) -> str:
    """Canonical JSON: sorted keys, no whitespace, shortest round-trip floats."""
    return json.dumps(message_to_dict(message), sort_keys=True, separators=(",", ":"),
                      allow_nan=False)


def decode(text: str):
    doc = json.loads(text)
    try:
        cls = MESSAGE_TYPES[doc.pop("type")]
    except KeyError:
        raise ProtocolError(f"unknown message type in {text[:80]!r}") from None
    return cls.from_dict(doc)


# -- trace schema (privacy audit) ---------------------------------------------

_COUNT = {"type": "integer", "minimum": 0}
_COUNTS = {"type": "array", "items": _COUNT}
_REALS = {"type": "array", "items": {"type": "number"}}
_GRID = {"type": "array", "items": {"type": "number", "exclusiveMinimum": 0}, "minItems": 1}
_MATRIX = {
    "type": "object",
    "properties": {"grid": _GRID, "at_risk_initial": _COUNT, "events": _COUNTS,
                   "censored": _COUNTS},
    "required": ["grid", "at_risk_initial", "events", "censored"],
    "additionalProperties": False,
}
_PARAMS = {
    "type": "object",
    "properties": {
        "layer_dims": {"type": "array", "items": {"type": "integer", "minimum": 1}},
        "weights": {"type": "array", "items": _REALS},
        "biases": {"type": "array", "items": _REALS},
    },
    "required": ["layer_dims", "weights", "biases"],
    "additionalProperties": False,
}


def _schema(name, **props):
    return {
        "type": "object",
        "properties": {"type": {"const": name}, **props},
        "required": ["type", *props],
        "additionalProperties": False,
    }


MESSAGE_SCHEMA = {"oneOf": [
    _schema("MaxTimeReport", client_id=_COUNT, max_time={"type": "number", "exclusiveMinimum": 0}),
    _schema("GridBroadcast", grid=_GRID),
    _schema("PartialMatrixUpload", client_id=_COUNT, matrix=_MATRIX),
    _schema("GlobalMatrixBroadcast", matrix=_MATRIX, total_n=_COUNT),
    _schema("ModelBroadcast", round=_COUNT, params=_PARAMS),
    _schema("ModelUpdateUpload", round=_COUNT, client_id=_COUNT, params=_PARAMS),
]}

TRACE_ENTRY_SCHEMA = {
    "type": "object",
    "properties": {
        "seq": _COUNT,
        "sender": {"type": "string"},
        "recipient": {"type": "string"},
        "message": MESSAGE_SCHEMA,
    },
    "required": ["seq", "sender", "recipient", "message"],
    "additionalProperties": False,
}


def audit_trace(entries) -> int:
    """Validate trace entries against the closed message schema.

    Only grid points, integer counts, scalar max-times and model parameters
    are admissible payloads. Raises ``ProtocolError`` on the first violation;
    returns the number of entries checked.
    """
    validator = jsonschema.Draft202012Validator(TRACE_ENTRY_SCHEMA)
    count = 0
    for entry in entries:
        errors = sorted(validator.iter_errors(entry), key=lambda e: e.path)
        if errors:
            raise ProtocolError(f"trace entry {entry.get('seq')!r} violates the message "
                                f"schema: {errors[0].message[:200]}")
        count += 1
    return count


def read_trace(path) -> list:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


# -- transport ----------------------------------------------------------------

class InProcessTransport:
    """Per-recipient FIFO queues carrying serialized messages.

    A running SHA-256 over the trace is always maintained; the full text is
    kept only with ``record=True``.
    """

    def __init__(self, record=False):
        self.record = record
        self.trace: list = []
        self._inboxes = defaultdict(deque)
        self._hash = hashlib.sha256()
        self._seq = 0

    def send(self, sender: str, recipient: str, message) -> None:
        text = encode(message)
        line = json.dumps({"seq": self._seq, "sender": sender, "recipient": recipient},
                          sort_keys=True)
        self._hash.update(line.encode())
        self._hash.update(text.encode())
        if self.record:
            self.trace.append((self._seq, sender, recipient, text))
        self._inboxes[recipient].append(text)
        self._seq += 1

    def receive(self, recipient: str, expected=None):
        box = self._inboxes[recipient]
        if not box:
            raise ProtocolError(f"no pending message for {recipient}")
        message = decode(box.popleft())
        if expected is not None and not isinstance(message, expected):
            raise ProtocolError(f"{recipient} expected {expected.__name__}, "
                                f"got {type(message).__name__}")
        return message

    def pending(self, recipient: str) -> int:
        return len(self._inboxes[recipient])

    @property
    def digest(self) -> str:
        return self._hash.hexdigest()

    @property
    def messages_sent(self) -> int:
        return self._seq

    def entries(self):
        for seq, sender, recipient, text in self.trace:
            yield {"seq": seq, "sender": sender, "recipient": recipient,
                   "message": json.loads(text)}

    def dump(self, path) -> None:
        """Write the recorded trace as JSON lines."""
        if not self.record:
            raise ProtocolError("transport was not recording")
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as fh:
            for seq, sender, recipient, text in self.trace:
                fh.write(f'{{"message":{text},"recipient":{json.dumps(recipient)},'
                         f'"sender":{json.dumps(sender)},"seq":{seq}}}\n')


# -- configuration and state --------------------------------------------------

@dataclass(frozen=True)
class FederationConfig:
    num_clients: int = 10
    participation_fraction: float = 0.75
    rounds: int = 50
    local_train: TrainConfig = field(default_factory=TrainConfig)
    seed: int = 0
    num_points: int = 8
    weighted: bool = False
    max_workers: int = 1

    def __post_init__(self):
        if self.num_clients < 1:
            raise DomainError("num_clients must be >= 1")
        if not 0 < self.participation_fraction <= 1:
            raise DomainError("participation_fraction must lie in (0, 1]")
        if self.rounds < 0:
            raise DomainError("rounds must be >= 0")
        if not 1 <= self.num_points <= 10:
            raise DomainError("num_points must be between 1 and 10")
        if self.seed < 0:
            raise DomainError("seed must be nonnegative")

    @property
    def participants(self) -> int:
        """``fraction * K`` rounded half up, at least one."""
        return max(1, int(np.floor(self.participation_fraction * self.num_clients + 0.5)))


class Phase(enum.Enum):
    NEGOTIATING = "negotiating"
    COLLECTING_MATRICES = "collecting_matrices"
    READY_TO_TRAIN = "ready_to_train"
    TRAINING = "training"
    DONE = "done"


@dataclass
class ClientState:
    """A client's private data plus what it has learned from the server."""

    client_id: int
    records: SurvivalData
    validation_records: SurvivalData
    pseudo: PseudoValueMatrix = None
    local_params: ModelParams = None
    grid: TimeGrid = None
    history: TrainHistory = None

    @property
    def address(self) -> str:
        return client_address(self.client_id)

    def max_time_report(self) -> MaxTimeReport:
        if len(self.records) == 0:
            raise ProtocolError(f"client {self.client_id} has no training records")
        return MaxTimeReport(self.client_id, float(self.records.time.max()))

    def accept_grid(self, message: GridBroadcast) -> None:
        self.grid = message.grid

    def partial_matrix_upload(self) -> PartialMatrixUpload:
        if self.grid is None:
            raise ProtocolError(f"client {self.client_id} has no grid yet")
        if len(self.records) == 0:
            raise ProtocolError(f"client {self.client_id} has no training records")
        return PartialMatrixUpload(self.client_id,
                                   survival.build_partial_matrix(self.records, self.grid))

    def accept_global_matrix(self, message: GlobalMatrixBroadcast) -> None:
        if message.matrix.grid != self.grid:
            raise ProtocolError("global matrix grid differs from the negotiated grid")
        self.pseudo = survival.pseudo_values(message.matrix, self.records, message.total_n)

    def train(self, message: ModelBroadcast, config: TrainConfig) -> ModelUpdateUpload:
        if self.pseudo is None:
            raise ProtocolError(f"client {self.client_id} has no pseudo values")
        params, self.history = train_local(message.params, self.records.covariates,
                                           self.pseudo.values, self.validation_records,
                                           self.grid, config)
        self.local_params = params
        return ModelUpdateUpload(message.round, self.client_id, params)

    def validation_counts(self, params: ModelParams):
        """Concordance counts of ``params`` on the local validation split."""
        data = self.validation_records
        curves = predict_curves(params, data.covariates, self.grid)
        return kernels.cindex_counts(curves.survival, data.time, data.event,
                                     metrics._column(self.grid, data.time))


@dataclass
class ServerState:
    config: FederationConfig
    global_params: ModelParams = None
    round: int = 0
    grid: TimeGrid = None
    global_matrix: PartialMatrix = None
    phase: Phase = Phase.NEGOTIATING
    client_sizes: dict = field(default_factory=dict)

    def _expect(self, phase: Phase):
        if self.phase is not phase:
            raise ProtocolError(f"server is {self.phase.value}, not {phase.value}")

    def initialize_model(self, p: int) -> ModelParams:
        if self.grid is None:
            raise ProtocolError("grid must be negotiated before the model is sized")
        dims = self.config.local_train.layer_dims(p, self.grid.m)
        self.global_params = init_params(dims, derive_rng(self.config.seed, "init"))
        return self.global_params


# -- operations ---------------------------------------------------------------

def negotiate_time_grid(max_times: Sequence[float], num_points: int = 8) -> TimeGrid:
    """Grid at ``10%, 20%, ...`` of the shortest client horizon."""
    if not max_times:
        raise ProtocolError("no max-time reports")
    if any(not t > 0 for t in max_times):
        raise ProtocolError(f"max times must be positive: {list(max_times)}")
    if not 1 <= num_points <= 10:
        raise DomainError("num_points must be between 1 and 10")
    horizon = min(float(t) for t in max_times)
    return TimeGrid(tuple(j * horizon / 10 for j in range(1, num_points + 1)))


def select_clients(round: int, config: FederationConfig) -> list:
    """Sorted ids of the clients active in ``round``; seeded by (seed, round)."""
    rng = derive_rng(config.seed, "select", round)
    chosen = rng.choice(config.num_clients, size=config.participants, replace=False)
    return sorted(int(c) for c in chosen)


def fedavg_aggregate(updates, weights: Mapping | None = None) -> ModelParams:
    """Coordinatewise mean of client parameters.

    ``updates`` maps client id to parameters (summed in ascending id order) or
    is a sequence summed as given. ``weights``, keyed like ``updates``, turns
    the mean into a weighted mean.
    """
    if isinstance(updates, Mapping):
        keys = sorted(updates)
        items = [updates[k] for k in keys]
    else:
        items = list(updates)
        keys = list(range(len(items)))
    if not items:
        raise ProtocolError("no updates to aggregate")
    first = items[0]
    for other in items[1:]:
        if not first.same_shape(other):
            raise ProtocolError("client updates have different layer shapes")
    if weights is None:
        w = [1.0] * len(items)
    else:
        w = [float(weights[k]) for k in keys]
    total = sum(w)
    # mean as first + weighted offsets: identical updates come back bit-exact
    acc = first.map(np.zeros_like)
    for wk, params in zip(w[1:], items[1:]):
        acc = acc.map(lambda a, b, f, wk=wk: a + wk * (b - f), params, first)
    return first.map(lambda f, a: f + a / total, acc)


def client_train_seed(seed: int, round: int, client_id: int) -> int:
    return derive_seed(seed, "train", round, client_id)


def _client_map(fn, clients, max_workers):
    if max_workers > 1 and len(clients) > 1:
        with ThreadPoolExecutor(max_workers=max_workers) as pool:
            return list(pool.map(fn, clients))
    return [fn(c) for c in clients]


def _check_ids(clients, server):
    ids = [c.client_id for c in clients]
    if sorted(ids) != list(range(server.config.num_clients)):
        raise ProtocolError(f"expected client ids 0..{server.config.num_clients - 1}, got {ids}")


def run_grid_negotiation(clients, server: ServerState, transport: InProcessTransport) -> TimeGrid:
    _check_ids(clients, server)
    server._expect(Phase.NEGOTIATING)
    for c in sorted(clients, key=lambda c: c.client_id):
        transport.send(c.address, SERVER, c.max_time_report())
    reports = [transport.receive(SERVER, MaxTimeReport) for _ in clients]
    reports.sort(key=lambda r: r.client_id)
    server.grid = negotiate_time_grid([r.max_time for r in reports], server.config.num_points)
    for c in sorted(clients, key=lambda c: c.client_id):
        transport.send(SERVER, c.address, GridBroadcast(server.grid))
        c.accept_grid(transport.receive(c.address, GridBroadcast))
    server.phase = Phase.COLLECTING_MATRICES
    return server.grid


def run_pseudo_phase(clients, server: ServerState, transport: InProcessTransport):
    """Exchange partial matrices and let every client derive pseudo values."""
    _check_ids(clients, server)
    server._expect(Phase.COLLECTING_MATRICES)
    clients = sorted(clients, key=lambda c: c.client_id)
    uploads = _client_map(lambda c: c.partial_matrix_upload(), clients,
                          server.config.max_workers)
    for c, up in zip(clients, uploads):
        transport.send(c.address, SERVER, up)
    received = sorted((transport.receive(SERVER, PartialMatrixUpload) for _ in clients),
                      key=lambda u: u.client_id)
    if [u.client_id for u in received] != [c.client_id for c in clients]:
        raise ProtocolError("missing or duplicate partial matrix uploads")
    for u in received:
        if u.matrix.grid != server.grid:
            raise ProtocolError(f"client {u.client_id} used a different grid")
    server.client_sizes = {u.client_id: u.matrix.at_risk_initial for u in received}
    server.global_matrix = survival.aggregate_partial_matrices([u.matrix for u in received])
    broadcast = GlobalMatrixBroadcast(server.global_matrix, server.global_matrix.at_risk_initial)
    for c in clients:
        transport.send(SERVER, c.address, broadcast)

    # receive in order on this thread, then compute in parallel
    messages = [transport.receive(c.address, GlobalMatrixBroadcast) for c in clients]
    _client_map(lambda pair: pair[0].accept_global_matrix(pair[1]), list(zip(clients, messages)),
                server.config.max_workers)
    server.phase = Phase.READY_TO_TRAIN
    return clients, server


@dataclass
class RoundLog:
    round: int
    participants: list
    mean_local_loss: float
    val_cindex: float
    local_epochs: list

    def to_dict(self):
        return {"round": self.round, "participants": self.participants,
                "mean_local_loss": self.mean_local_loss, "val_cindex": self.val_cindex,
                "local_epochs": self.local_epochs}


def _pooled_cindex(clients, params):
    conc = ties = comp = 0
    for c in clients:
        a, b, n = c.validation_counts(params)
        conc, ties, comp = conc + a, ties + b, comp + n
    return (conc + 0.5 * ties) / comp if comp else float("nan")


def run_federated_training(clients, server: ServerState, transport: InProcessTransport):
    """FedAvg rounds over the selected clients.

    Returns the final global parameters and one :class:`RoundLog` per round.
    The logged validation C-index pools concordance counts computed by each
    client on its own validation split.
    """
    _check_ids(clients, server)
    server._expect(Phase.READY_TO_TRAIN)
    cfg = server.config
    by_id = {c.client_id: c for c in clients}
    if server.global_params is None:
        server.initialize_model(clients[0].records.p)
    server.phase = Phase.TRAINING
    log = []
    for v in range(1, cfg.rounds + 1):
        active = select_clients(v, cfg)
        for cid in active:
            transport.send(SERVER, client_address(cid), ModelBroadcast(v, server.global_params))
        inbound = [(by_id[cid], transport.receive(client_address(cid), ModelBroadcast))
                   for cid in active]

        def work(pair):
            client, msg = pair
            local = replace(cfg.local_train, seed=client_train_seed(cfg.seed, msg.round,
                                                                     client.client_id))
            return client.train(msg, local)

        uploads = _client_map(work, inbound, cfg.max_workers)
        for up in uploads:
            transport.send(client_address(up.client_id), SERVER, up)
        received = {}
        for _ in active:
            up = transport.receive(SERVER, ModelUpdateUpload)
            if up.round != v or up.client_id in received or up.client_id not in active:
                raise ProtocolError(f"unexpected update (round {up.round}, "
                                    f"client {up.client_id}) in round {v}")
            received[up.client_id] = up.params
        weights = ({cid: server.client_sizes[cid] for cid in received}
                   if cfg.weighted else None)
        server.global_params = fedavg_aggregate(received, weights)
        server.round = v
        losses = [by_id[cid].history.losses[-1] for cid in active if by_id[cid].history.losses]
        entry = RoundLog(v, active, float(np.mean(losses)) if losses else float("nan"),
                         _pooled_cindex(clients, server.global_params),
                         [by_id[cid].history.epochs for cid in active])
        log.append(entry)
        logger.info("round %d: clients %s, loss %.4f, val C-index %.4f",
                    v, active, entry.mean_local_loss, entry.val_cindex)
    server.phase = Phase.DONE
    return server.global_params, log


def make_clients(shards: Sequence[tuple]) -> list:
    """Build client states from ``(train, validation)`` pairs, ids in order."""
    return [ClientState(k, train, valid) for k, (train, valid) in enumerate(shards)]


def run_federation(shards: Sequence[tuple], config: FederationConfig,
                   transport: InProcessTransport | None = None):
    """All three phases end to end. Returns ``(params, log, clients, server)``."""
    transport = transport or InProcessTransport()
    clients = make_clients(shards)
    server = ServerState(config)
    run_grid_negotiation(clients, server, transport)
    run_pseudo_phase(clients, server, transport)
    params, log = run_federated_training(clients, server, transport)
    return params, log, clients, server
