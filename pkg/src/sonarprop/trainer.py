"""Mean-squared-error training with ADAM and early stopping on a validation set."""

import csv
import logging
from dataclasses import dataclass, field

import numpy as np

from . import models
from .exceptions import RejectedInputError, TrainingDivergedError
from .tensor_core import DTYPE, mse_loss

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 64
    max_epochs: int = 50
    patience: int = 5
    seed: int = 0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise RejectedInputError("learning_rate must be > 0")
        if self.patience < 1:
            raise RejectedInputError("patience must be >= 1")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise RejectedInputError("batch_size and max_epochs must be >= 1")


@dataclass
class AdamState:
    m: list
    v: list
    t: int = 0

    @classmethod
    def zeros_like(cls, params):
        def zeros(p):
            return None if p is None else (np.zeros_like(p[0]), np.zeros_like(p[1]))

        return cls([zeros(p) for p in params], [zeros(p) for p in params], 0)


def _check_finite(grads, epoch):
    for i, g in enumerate(grads):
        if g is None:
            continue
        for arr in g:
            if not np.isfinite(arr).all():
                finite = arr[np.isfinite(arr)]
                magnitude = float(np.abs(finite).max()) if finite.size else float("nan")
                raise TrainingDivergedError("non-finite gradient", epoch=epoch, layer=i, magnitude=magnitude)


def adam_step(params, grads, state, config, epoch=None):
    """One bias-corrected ADAM update; returns new parameters and state."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise RejectedInputError("params, grads and optimizer state have different lengths")
    _check_finite(grads, epoch)
    t = state.t + 1
    b1, b2 = config.beta1, config.beta2
    c1, c2 = 1 - b1 ** t, 1 - b2 ** t
    new_params, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p is None:
            new_params.append(None)
            new_m.append(None)
            new_v.append(None)
            continue
        pair_p, pair_m, pair_v = [], [], []
        for pi, gi, mi, vi in zip(p, g, m, v):
            if pi.shape != gi.shape or pi.shape != mi.shape:
                raise RejectedInputError(f"shape mismatch {pi.shape} / {gi.shape} / {mi.shape}")
            mi = b1 * mi + (1 - b1) * gi
            vi = b2 * vi + (1 - b2) * gi * gi
            step = config.learning_rate * (mi / c1) / (np.sqrt(vi / c2) + config.eps)
            pair_p.append((pi - step).astype(DTYPE))
            pair_m.append(mi.astype(DTYPE))
            pair_v.append(vi.astype(DTYPE))
        new_params.append(tuple(pair_p))
        new_m.append(tuple(pair_m))
        new_v.append(tuple(pair_v))
    return new_params, AdamState(new_m, new_v, t)


def loss_and_grads(spec, params, patches, targets):
    out, cache = models.forward(spec, params, patches, keep_cache=True)
    loss, grad = mse_loss(out.reshape(-1), targets)
    grads = models.backward(spec, params, cache, grad.reshape(out.shape))
    return loss, grads


def evaluate_mse(spec, params, patches, targets, batch_size=256):
    pred = models.predict_patches(spec, params, patches, batch_size)
    return mse_loss(pred, np.asarray(targets, DTYPE))[0]


@dataclass
class TrainHistory:
    epochs: list = field(default_factory=list)
    best_epoch: int = -1
    best_val_mse: float = float("inf")
    stopped_early: bool = False

    def as_rows(self):
        return [(e["epoch"], e["train_mse"], e["val_mse"]) for e in self.epochs]

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", "train_mse", "val_mse"])
            for epoch, tr, va in self.as_rows():
                writer.writerow([epoch, f"{tr:.8g}", f"{va:.8g}"])


def train(spec, params, train_set, val_set, config=TrainConfig()):
    """Fit ``params`` and return the weights of the best validation epoch.

    ``train_set`` and ``val_set`` are ``(patches, targets)`` pairs or objects
    with ``patches`` and ``objectness`` attributes.
    """
    x_train, y_train = _unpack(train_set, "train")
    x_val, y_val = _unpack(val_set, "validation")
    models.check_params(spec, params)
    rng = np.random.default_rng(config.seed)
    state = AdamState.zeros_like(params)
    history = TrainHistory()
    best_params = params
    since_best = 0
    n = len(x_train)
    for epoch in range(1, config.max_epochs + 1):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            loss, grads = loss_and_grads(spec, params, x_train[idx], y_train[idx])
            if not np.isfinite(loss):
                raise TrainingDivergedError("training loss is not finite", epoch=epoch, magnitude=loss)
            params, state = adam_step(params, grads, state, config, epoch=epoch)
            total += loss * len(idx)
        train_mse = total / n
        val_mse = evaluate_mse(spec, params, x_val, y_val)
        if not np.isfinite(val_mse):
            raise TrainingDivergedError("validation loss is not finite", epoch=epoch, magnitude=val_mse)
        history.epochs.append({"epoch": epoch, "train_mse": train_mse, "val_mse": val_mse})
        logger.info("epoch %d train_mse=%.5f val_mse=%.5f", epoch, train_mse, val_mse)
        if val_mse < history.best_val_mse:
            history.best_val_mse = val_mse
            history.best_epoch = epoch
            best_params = params
            since_best = 0
        else:
            since_best += 1
            if since_best >= config.patience:
                history.stopped_early = True
                break
    if history.stopped_early and not 15 <= len(history.epochs) <= 20:
        logger.info("early stopping after %d epochs (reported range is 15-20)", len(history.epochs))
    return best_params, history


def _unpack(dataset, name):
    if hasattr(dataset, "patches"):
        x, y = dataset.patches, dataset.objectness
    else:
        x, y = dataset
    x = np.asarray(x, DTYPE)
    y = np.asarray(y, DTYPE).reshape(-1)
    if len(x) == 0:
        raise RejectedInputError(f"{name} set is empty")
    if len(x) != len(y):
        raise RejectedInputError(f"{name} set has {len(x)} patches but {len(y)} targets")
    if x.ndim == 3:
        x = x[:, None]
    return x, y
