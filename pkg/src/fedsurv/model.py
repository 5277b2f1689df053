"""Feed-forward network regressing survival probabilities on pseudo values.

Covariates go through SELU hidden layers and a sigmoid output layer with one
unit per grid point. Training minimizes the pseudo-value loss

    L(t) = mean_i [ J_i(t) * (1 - 2 S(t | x_i)) + S(t | x_i)^2 ]

averaged over grid points, with Adam and early stopping on the validation
concordance index. Forward and backward passes are plain numpy.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import DomainError, TrainingError
from .metrics import PredictedCurves, td_cindex
from .survival import SurvivalData, TimeGrid

logger = logging.getLogger(__name__)

SELU_SCALE = 1.0507009873554805
SELU_ALPHA = 1.6732632423543772
DEFAULT_HIDDEN = (128, 64, 64, 32, 32)
_ONE_MINUS = np.nextafter(1.0, 0.0)
_TINY = np.finfo(np.float64).tiny


@dataclass
class ModelParams:
    """Weights ``W_l`` (fan_in x fan_out) and biases ``b_l`` per layer."""

    weights: list
    biases: list

    def __post_init__(self):
        self.weights = [np.asarray(w, dtype=np.float64) for w in self.weights]
        self.biases = [np.asarray(b, dtype=np.float64) for b in self.biases]
        if len(self.weights) != len(self.biases) or not self.weights:
            raise DomainError("need one bias vector per weight matrix")
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise DomainError(f"layer {k}: weight {w.shape} and bias {b.shape} disagree")
            if k and w.shape[0] != self.weights[k - 1].shape[1]:
                raise DomainError(f"layer {k} input width does not match layer {k - 1}")
            if not (np.isfinite(w).all() and np.isfinite(b).all()):
                raise DomainError(f"layer {k} has non-finite entries")

    @property
    def layer_dims(self) -> tuple:
        return (self.weights[0].shape[0], *(w.shape[1] for w in self.weights))

    def copy(self) -> "ModelParams":
        return ModelParams([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def arrays(self) -> list:
        return [*self.weights, *self.biases]

    def map(self, fn, *others) -> "ModelParams":
        """Apply ``fn`` arraywise across this and ``others`` (same shapes)."""
        return ModelParams(
            [fn(*ws) for ws in zip(self.weights, *(o.weights for o in others))],
            [fn(*bs) for bs in zip(self.biases, *(o.biases for o in others))],
        )

    def same_shape(self, other: "ModelParams") -> bool:
        return self.layer_dims == other.layer_dims

    def equals(self, other: "ModelParams") -> bool:
        return self.same_shape(other) and all(
            np.array_equal(a, b) for a, b in zip(self.arrays(), other.arrays())
        )

    def to_dict(self) -> dict:
        """Layer dims plus row-major flattened weights."""
        return {
            "layer_dims": list(self.layer_dims),
            "weights": [w.ravel().tolist() for w in self.weights],
            "biases": [b.tolist() for b in self.biases],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "ModelParams":
        dims = [int(d) for d in doc["layer_dims"]]
        if len(doc["weights"]) != len(dims) - 1 or len(doc["biases"]) != len(dims) - 1:
            raise DomainError("layer count does not match layer_dims")
        weights = []
        for k, flat in enumerate(doc["weights"]):
            arr = np.array(flat, dtype=np.float64)
            if arr.size != dims[k] * dims[k + 1]:
                raise DomainError(f"layer {k} has {arr.size} weights, expected "
                                  f"{dims[k]}x{dims[k + 1]}")
            weights.append(arr.reshape(dims[k], dims[k + 1]))
        return cls(weights, [np.array(b, dtype=np.float64) for b in doc["biases"]])


def init_params(layer_dims, rng) -> ModelParams:
    """Normal weights with std ``1/sqrt(fan_in)``, zero biases."""
    dims = [int(d) for d in layer_dims]
    if len(dims) < 2 or min(dims) < 1:
        raise DomainError(f"invalid layer dims {dims}")
    weights = [rng.normal(0.0, 1.0 / np.sqrt(a), size=(a, b)) for a, b in zip(dims, dims[1:])]
    return ModelParams(weights, [np.zeros(b) for b in dims[1:]])


def zeros_like(params: ModelParams) -> ModelParams:
    return params.map(np.zeros_like)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    dropout_rate: float = 0.1
    max_epochs: int = 1000
    patience: int = 50
    batch_size: int = 256
    seed: int = 0
    hidden_layers: tuple = DEFAULT_HIDDEN

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise DomainError("learning_rate must be positive")
        if not 0 <= self.dropout_rate < 1:
            raise DomainError("dropout_rate must lie in [0, 1)")
        if self.max_epochs < 0 or self.patience < 1 or self.batch_size < 1:
            raise DomainError("max_epochs >= 0, patience >= 1 and batch_size >= 1 required")
        object.__setattr__(self, "hidden_layers", tuple(int(h) for h in self.hidden_layers))

    def layer_dims(self, p: int, m: int) -> tuple:
        return (p, *self.hidden_layers, m)


def selu(z):
    return SELU_SCALE * np.where(z > 0, z, SELU_ALPHA * np.expm1(np.minimum(z, 0.0)))


def _selu_grad(z):
    return SELU_SCALE * np.where(z > 0, 1.0, SELU_ALPHA * np.exp(np.minimum(z, 0.0)))


def sigmoid(z):
    e = np.exp(-np.abs(z))
    s = np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return np.clip(s, _TINY, _ONE_MINUS)


def _dropout_masks(params, n, rate, rng):
    if rate == 0 or rng is None:
        return None
    keep = 1.0 - rate
    return [(rng.random((n, w.shape[1])) < keep) / keep for w in params.weights[:-1]]


def _forward(params: ModelParams, x, masks):
    pre, acts = [], [x]
    h = x
    last = len(params.weights) - 1
    for k, (w, b) in enumerate(zip(params.weights, params.biases)):
        z = h @ w + b
        pre.append(z)
        if k < last:
            h = selu(z)
            if masks is not None:
                h = h * masks[k]
        else:
            h = sigmoid(z)
        acts.append(h)
    return pre, acts


def _as_batch(params, x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != params.layer_dims[0]:
        raise DomainError(f"expected {params.layer_dims[0]} covariates, got shape {x.shape}")
    return x


def forward(params: ModelParams, x, train=False, rng=None, dropout_rate=0.0):
    """Predicted survival at each grid point, shape ``(n, m)`` (or ``(m,)``).

    In train mode hidden activations get inverted dropout with masks drawn
    from ``rng``; eval mode is deterministic.
    """
    single = np.ndim(x) == 1
    x = _as_batch(params, x)
    masks = _dropout_masks(params, x.shape[0], dropout_rate, rng) if train else None
    out = _forward(params, x, masks)[1][-1]
    return out[0] if single else out


def pseudo_loss(predictions, pseudo) -> float:
    """Mean over grid points of ``mean_i J (1 - 2S) + S^2``.

    Equals the squared error minus the constant ``mean(J^2 - J)``, so it can
    be negative when pseudo values fall outside [0, 1].
    """
    s = np.asarray(predictions, dtype=np.float64)
    j = np.asarray(pseudo, dtype=np.float64)
    if s.shape != j.shape:
        raise DomainError(f"prediction shape {s.shape} != pseudo shape {j.shape}")
    return float(np.mean(j * (1.0 - 2.0 * s) + s * s))


def pseudo_loss_grad(predictions, pseudo):
    s = np.asarray(predictions, dtype=np.float64)
    j = np.asarray(pseudo, dtype=np.float64)
    return (-2.0 * j + 2.0 * s) / s.size


def mse_loss(predictions, pseudo) -> float:
    s = np.asarray(predictions, dtype=np.float64)
    return float(np.mean((s - np.asarray(pseudo, dtype=np.float64)) ** 2))


def mse_loss_grad(predictions, pseudo):
    s = np.asarray(predictions, dtype=np.float64)
    return 2.0 * (s - np.asarray(pseudo, dtype=np.float64)) / s.size


def loss_and_grad(params: ModelParams, x, pseudo, train=False, rng=None, dropout_rate=0.0):
    """Pseudo loss and its exact gradient by backpropagation.

    In train mode one dropout mask set is drawn from ``rng`` and held fixed
    for the whole pass.
    """
    x = _as_batch(params, x)
    pseudo = np.asarray(pseudo, dtype=np.float64)
    if x.shape[0] == 0:
        raise DomainError("empty batch")
    masks = _dropout_masks(params, x.shape[0], dropout_rate, rng) if train else None
    pre, acts = _forward(params, x, masks)
    out = acts[-1]
    loss = pseudo_loss(out, pseudo)
    delta = pseudo_loss_grad(out, pseudo) * out * (1.0 - out)
    n_layers = len(params.weights)
    gw, gb = [None] * n_layers, [None] * n_layers
    for k in range(n_layers - 1, -1, -1):
        gw[k] = acts[k].T @ delta
        gb[k] = delta.sum(axis=0)
        if k:
            back = delta @ params.weights[k].T
            if masks is not None:
                back = back * masks[k - 1]
            delta = back * _selu_grad(pre[k - 1])
    return loss, ModelParams(gw, gb)


def backward(params, x, pseudo, train=False, rng=None, dropout_rate=0.0) -> ModelParams:
    return loss_and_grad(params, x, pseudo, train, rng, dropout_rate)[1]


@dataclass
class AdamState:
    first_moment: ModelParams
    second_moment: ModelParams
    step_count: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def zeros(cls, params: ModelParams) -> "AdamState":
        return cls(zeros_like(params), zeros_like(params))


def adam_step(params: ModelParams, grads: ModelParams, state: AdamState, lr: float):
    """One bias-corrected Adam update; returns ``(params, state)``."""
    if not params.same_shape(grads):
        raise DomainError("gradient shape does not match parameters")
    if not all(np.isfinite(g).all() for g in grads.arrays()):
        raise TrainingError("non-finite gradient")
    b1, b2 = state.beta1, state.beta2
    t = state.step_count + 1
    m1 = state.first_moment.map(lambda m, g: b1 * m + (1 - b1) * g, grads)
    m2 = state.second_moment.map(lambda v, g: b2 * v + (1 - b2) * g * g, grads)
    c1 = 1 - b1**t
    c2 = 1 - b2**t
    new = params.map(
        lambda w, m, v: w - lr * (m / c1) / (np.sqrt(v / c2) + state.epsilon), m1, m2
    )
    return new, replace(state, first_moment=m1, second_moment=m2, step_count=t)


@dataclass
class TrainHistory:
    losses: list = field(default_factory=list)
    val_cindex: list = field(default_factory=list)
    best_epoch: int = 0
    best_cindex: float = float("nan")

    @property
    def epochs(self) -> int:
        return len(self.losses)


def predict_curves(params: ModelParams, covariates, grid: TimeGrid) -> PredictedCurves:
    return PredictedCurves(grid, forward(params, np.asarray(covariates).reshape(-1, params.layer_dims[0])))


def train_local(params: ModelParams, covariates, pseudo, validation: SurvivalData,
                grid: TimeGrid, config: TrainConfig):
    """Minibatch Adam on pseudo-value targets with C-index early stopping.

    After each epoch the validation C-index of the current weights is
    computed; the best-scoring weights are returned. Training stops after
    ``config.patience`` epochs without improvement or at ``max_epochs``.

    Returns
    -------
    best : ModelParams
    history : TrainHistory
    """
    x = _as_batch(params, covariates)
    y = np.asarray(pseudo, dtype=np.float64)
    if y.shape != (x.shape[0], grid.m):
        raise DomainError(f"pseudo targets must have shape ({x.shape[0]}, {grid.m})")
    if params.layer_dims[-1] != grid.m:
        raise DomainError("network output width does not match the grid")
    history = TrainHistory()
    best = params
    if config.max_epochs == 0:
        return best, history
    if len(validation) == 0:
        raise DomainError("validation set is empty")

    rng = np.random.default_rng(config.seed)
    state = AdamState.zeros(params)
    current = params
    n = x.shape[0]
    stale = 0
    for epoch in range(1, config.max_epochs + 1):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            loss, grads = loss_and_grad(current, x[idx], y[idx], train=True, rng=rng,
                                        dropout_rate=config.dropout_rate)
            current, state = adam_step(current, grads, state, config.learning_rate)
            total += loss * len(idx)
        history.losses.append(total / n)
        score = td_cindex(predict_curves(current, validation.covariates, grid), validation)
        history.val_cindex.append(score)
        if not score <= history.best_cindex:  # also true while best is nan
            history.best_cindex = score
            history.best_epoch = epoch
            best = current
            stale = 0
        else:
            stale += 1
            if stale >= config.patience:
                break
    logger.debug("trained %d epochs, best epoch %d (val C-index %.4f)",
                 history.epochs, history.best_epoch, history.best_cindex)
    return best, history


__all__ = [
    "ModelParams", "TrainConfig", "AdamState", "TrainHistory", "init_params", "forward",
    "pseudo_loss", "mse_loss", "loss_and_grad", "backward", "adam_step", "train_local",
    "predict_curves", "selu", "sigmoid",
]
