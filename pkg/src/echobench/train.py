"""MSE training with Adam, step learning-rate decay, clipping and early stopping."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from .layers import Context
from .models import ConfigError, Model, family_defaults
from .tensor import NonFiniteError, Tensor, abs_, add, backward, mean, scale, square, sub, sum_

log = logging.getLogger(__name__)

ADAM_BETA1, ADAM_BETA2, ADAM_EPS = 0.9, 0.999, 1e-8
HISTORY_COLUMNS = ("epoch", "lr", "train_loss", "train_rmse", "val_loss", "val_rmse")
DEFAULT_CLIP_NORM = 1.0  # threshold used when a config enables clipping without a value


@dataclass
class ExperimentConfig:
    initial_lr: float = 1e-3
    decay_period: int = 10
    decay_factor: float = 2.0
    max_epochs: int = 50
    patience: int | None = 20
    batch_size: int = 2
    dropout_rate: float = 0.5
    clip_norm: float | None = None
    l1: float = 0.0
    l2: float = 0.0
    weight_decay: float = 0.0
    seed: int = 0
    precision: str = "float32"
    standardize_targets: bool = True

    def validate(self) -> "ExperimentConfig":
        if self.batch_size < 1:
            raise ConfigError("batch_size: must be >= 1")
        if self.max_epochs < 1:
            raise ConfigError("max_epochs: must be >= 1")
        if self.patience is not None and not 1 <= self.patience <= self.max_epochs:
            raise ConfigError("patience: must lie in [1, max_epochs] or be null")
        if not 0 <= self.dropout_rate < 1:
            raise ConfigError("dropout_rate: must lie in [0, 1)")
        if self.initial_lr <= 0 or self.decay_period < 1 or self.decay_factor <= 0:
            raise ConfigError("initial_lr/decay_period/decay_factor: must be positive")
        if self.clip_norm is not None and self.clip_norm <= 0:
            raise ConfigError("clip_norm: must be positive or null")
        if min(self.l1, self.l2, self.weight_decay) < 0:
            raise ConfigError("l1/l2/weight_decay: must be non-negative")
        if self.precision not in ("float32", "float64"):
            raise ConfigError("precision: must be float32 or float64")
        return self

    @classmethod
    def for_family(cls, family: str, rnn_cell: str = "GRU", **overrides) -> "ExperimentConfig":
        values = family_defaults(family, rnn_cell)
        values.update(overrides)
        return cls(**values).validate()

    @property
    def dtype(self):
        return np.dtype(self.precision)


EXPERIMENT_KEYS = tuple(f.name for f in fields(ExperimentConfig))


# ---------------------------------------------------------------------------
# loss, schedule, optimizer

def is_regularized(name: str) -> bool:
    """Kernels and dense weights are regularized; biases and norm parameters are not."""
    leaf = name.rsplit(".", 1)[-1]
    return leaf in ("weight", "W", "U")


def training_loss(predictions: Tensor, targets, parameters: Sequence[Tensor] = (), l1: float = 0.0,
                  l2: float = 0.0) -> Tensor:
    """mean((p - t)^2) + l1 * sum|w| + l2 * sum w^2."""
    if predictions.size == 0:
        raise ValueError("empty batch")
    targets = np.asarray(targets, dtype=predictions.dtype).reshape(predictions.shape)
    loss = mean(square(sub(predictions, Tensor(targets))))
    for w in parameters:
        if l1:
            loss = add(loss, scale(sum_(abs_(w)), l1))
        if l2:
            loss = add(loss, scale(sum_(square(w)), l2))
    return loss


def lr_at_epoch(config: ExperimentConfig, epoch: int) -> float:
    if epoch < 0:
        raise ValueError("epoch must be non-negative")
    return config.initial_lr * config.decay_factor ** (-(epoch // config.decay_period))


def clip_gradients(grads: list[np.ndarray], max_norm: float) -> list[np.ndarray]:
    """Rescale all gradients jointly when their global L2 norm exceeds ``max_norm``."""
    if max_norm <= 0:
        raise ValueError("max_norm must be positive")
    total = math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads))
    if total <= max_norm:
        return grads
    factor = max_norm / total
    return [g * g.dtype.type(factor) for g in grads]


def global_norm(grads: Sequence[np.ndarray]) -> float:
    return math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads))


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0
    beta1: float = ADAM_BETA1
    beta2: float = ADAM_BETA2
    eps: float = ADAM_EPS

    @classmethod
    def zeros_like(cls, params: Sequence[np.ndarray]) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])


def adam_step(params: list[np.ndarray], grads: list[np.ndarray], state: AdamState, lr: float,
              weight_decay: float = 0.0) -> tuple[list[np.ndarray], AdamState]:
    """One bias-corrected Adam update; decoupled weight decay subtracts lr * wd * w afterwards."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("params, grads and optimizer state must align")
    for i, g in enumerate(grads):
        if g.shape != params[i].shape:
            raise ValueError(f"gradient {i} shape {g.shape} != parameter shape {params[i].shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for parameter {i}")
    t = state.t + 1
    b1, b2 = state.beta1, state.beta2
    c1, c2 = 1.0 - b1 ** t, 1.0 - b2 ** t
    new_params, ms, vs = [], [], []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        step = lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        new = p - step.astype(p.dtype, copy=False)
        if weight_decay:
            new = new - (lr * weight_decay) * p
        new_params.append(new.astype(p.dtype, copy=False))
        ms.append(m)
        vs.append(v)
    return new_params, AdamState(ms, vs, t, b1, b2, state.eps)


# ---------------------------------------------------------------------------
# early stopping and history

class EarlyStopping:
    """Tracks the best (strictly lowest) validation RMSE; stops ``patience`` epochs after it."""

    def __init__(self, patience: int | None):
        self.patience = patience
        self.best = math.inf
        self.best_epoch = -1

    def update(self, epoch: int, val_rmse: float) -> bool:
        """Record an epoch; return True when training should halt after it."""
        improved = val_rmse < self.best
        if improved:
            self.best, self.best_epoch = val_rmse, epoch
        return self.patience is not None and epoch - self.best_epoch >= self.patience


@dataclass
class History:
    epoch: list[int] = field(default_factory=list)
    lr: list[float] = field(default_factory=list)
    train_loss: list[float] = field(default_factory=list)
    train_rmse: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    val_rmse: list[float] = field(default_factory=list)
    best_epoch: int = -1
    status: str = "completed"

    def append(self, **row):
        for key in HISTORY_COLUMNS:
            getattr(self, key).append(row[key])

    def __len__(self):
        return len(self.epoch)

    def rows(self):
        for i in range(len(self)):
            yield {k: getattr(self, k)[i] for k in HISTORY_COLUMNS}

    def to_csv(self, path: str | Path) -> Path:
        path = Path(path)
        with path.open("w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(HISTORY_COLUMNS)
            for row in self.rows():
                writer.writerow([row["epoch"]] + [repr(float(row[k])) for k in HISTORY_COLUMNS[1:]])
        return path

    @classmethod
    def from_csv(cls, path: str | Path) -> "History":
        h = cls()
        with Path(path).open(newline="") as fh:
            reader = csv.DictReader(fh)
            if tuple(reader.fieldnames or ()) != HISTORY_COLUMNS:
                raise ValueError(f"unexpected history columns {reader.fieldnames}")
            for row in reader:
                h.append(epoch=int(row["epoch"]), **{k: float(row[k]) for k in HISTORY_COLUMNS[1:]})
        if len(h):
            h.best_epoch = h.epoch[int(np.argmin(h.val_rmse))]
        return h


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, history: History):
        super().__init__(message)
        self.history = history


# ---------------------------------------------------------------------------
# epoch loop

def _rng_streams(seed: int) -> tuple[np.random.Generator, np.random.Generator, np.random.Generator]:
    """Independent (init, shuffle, dropout) generators derived from one seed."""
    init, shuffle, drop = np.random.SeedSequence(seed).spawn(3)
    return np.random.default_rng(init), np.random.default_rng(shuffle), np.random.default_rng(drop)


def init_rng(seed: int) -> np.random.Generator:
    return _rng_streams(seed)[0]


def predict(model: Model, clips: np.ndarray, batch_size: int = 8) -> np.ndarray:
    """Inference-mode predictions as a flat float64 array."""
    out = []
    ctx = Context(False, None)
    for start in range(0, len(clips), batch_size):
        out.append(model(clips[start:start + batch_size], ctx).data.reshape(-1))
    return np.concatenate(out).astype(np.float64)


def _snapshot(model: Model):
    return ([p.data.copy() for p in model.parameters()],
            [(s.mean.copy(), s.var.copy()) for _, s in model.named_buffers()])


def _restore(model: Model, snap) -> None:
    params, buffers = snap
    for p, value in zip(model.parameters(), params):
        p.data = value.copy()
    for (_, s), (mu, var) in zip(model.named_buffers(), buffers):
        s.mean, s.var = mu.copy(), var.copy()


def fit(model: Model, train: tuple[np.ndarray, np.ndarray], val: tuple[np.ndarray, np.ndarray],
        config: ExperimentConfig, eval_batch_size: int | None = None) -> tuple[Model, History]:
    """Train in place and restore the best-validation-RMSE parameters.

    ``train`` and ``val`` are ``(clips, labels)`` pairs with clips shaped
    ``N x T x H x W x 1``. Raises :class:`TrainingDiverged` (carrying the
    partial history) on a non-finite loss.
    """
    config.validate()
    x_train, y_train = train
    x_val, y_val = val
    if len(x_train) == 0 or len(x_val) == 0:
        raise ValueError("training and validation sets must be non-empty")
    if config.batch_size > len(x_train):
        raise ConfigError(f"batch_size: {config.batch_size} exceeds training set size {len(x_train)}")
    y_train = np.asarray(y_train, dtype=np.float64)
    y_val = np.asarray(y_val, dtype=np.float64)
    if config.standardize_targets:
        model.target_mean = float(y_train.mean())
        model.target_std = float(y_train.std()) or 1.0
    _, shuffle_rng, dropout_rng = _rng_streams(config.seed)
    named = list(model.named_parameters())
    params = [p for _, p in named]
    regularized = [p for name, p in named if is_regularized(name)] if (config.l1 or config.l2) else []
    state = AdamState.zeros_like([p.data for p in params])
    stopper = EarlyStopping(config.patience)
    history = History()
    best = _snapshot(model)
    eval_bs = eval_batch_size or max(config.batch_size, 8)
    ctx = Context(True, dropout_rng)

    for epoch in range(config.max_epochs):
        lr = lr_at_epoch(config, epoch)
        order = shuffle_rng.permutation(len(x_train))
        loss_sum, sq_sum = 0.0, 0.0
        for start in range(0, len(order), config.batch_size):
            idx = np.sort(order[start:start + config.batch_size])
            try:
                preds = model(x_train[idx], ctx)
            except NonFiniteError as exc:
                history.status = "diverged"
                raise TrainingDiverged(f"epoch {epoch}: {exc}", history) from exc
            loss = training_loss(preds, y_train[idx], regularized, config.l1, config.l2)
            if not np.isfinite(loss.data):
                history.status = "diverged"
                raise TrainingDiverged(f"epoch {epoch}: non-finite training loss", history)
            grads_map = backward(loss, wrt=params)
            grads = [grads_map[p] for p in params]
            if config.clip_norm is not None:
                grads = clip_gradients(grads, config.clip_norm)
            try:
                new_values, state = adam_step([p.data for p in params], grads, state, lr, config.weight_decay)
            except NonFiniteError as exc:
                history.status = "diverged"
                raise TrainingDiverged(f"epoch {epoch}: {exc}", history) from exc
            for p, value in zip(params, new_values):
                p.data = value
            loss_sum += float(loss.data) * len(idx)
            residual = preds.data.reshape(-1).astype(np.float64) - y_train[idx]
            sq_sum += float(np.sum(residual ** 2))
        val_pred = predict(model, x_val, eval_bs)
        val_mse = float(np.mean((val_pred - y_val) ** 2))
        if not np.isfinite(val_mse):
            history.status = "diverged"
            raise TrainingDiverged(f"epoch {epoch}: non-finite validation loss", history)
        history.append(epoch=epoch, lr=lr, train_loss=loss_sum / len(order),
                       train_rmse=math.sqrt(sq_sum / len(order)), val_loss=val_mse,
                       val_rmse=math.sqrt(val_mse))
        previous_best = stopper.best_epoch
        stop = stopper.update(epoch, math.sqrt(val_mse))
        if stopper.best_epoch != previous_best:
            best = _snapshot(model)
        log.debug("epoch %d lr %.2e train %.4f val_rmse %.4f", epoch, lr, loss_sum / len(order), math.sqrt(val_mse))
        if stop:
            break
    history.best_epoch = stopper.best_epoch
    _restore(model, best)
    return model, history
