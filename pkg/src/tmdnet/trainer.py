"""Optimizers, the training loop with early stopping, and hyperparameter selection."""
from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .config import derive_seed
from .dataset import Segment, class_weights, make_batches
from .errors import NumericError, TmdError, ValidationError
from .layers import Model, ModelSpec, build_model, forward, weighted_cross_entropy
from .metrics import confusion_matrix, macro_f1, predict

log = logging.getLogger(__name__)

IMPROVEMENT = 1e-6


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-2
    weight_decay: float = 3e-3
    batch_size: int = 128
    optimizer: str = "adadelta"
    max_epochs: int = 2000
    patience: int | None = 100
    seed: int = 0
    pad_mode: str = "wrapping"
    fixed_length: int | None = None
    dtype: str = "float32"
    rho: float = 0.9
    adadelta_eps: float = 1e-6
    betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ValidationError("learning_rate must be non-negative")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ValidationError("batch_size and max_epochs must be >= 1")
        if self.optimizer not in ("adadelta", "adam"):
            raise ValidationError(f"unknown optimizer {self.optimizer!r}")


GEOLIFE_TRAIN = TrainConfig()
SHL_TRAIN = TrainConfig(learning_rate=1e-3, weight_decay=1e-3, batch_size=64, optimizer="adam",
                        max_epochs=50, patience=None)


# optimizers -----------------------------------------------------------------

@dataclass
class OptimizerState:
    kind: str
    slots: dict = field(default_factory=dict)
    step: int = 0


def decays(name: str) -> bool:
    return not name.endswith(".alpha")


def optimizer_step(kind: str, params: dict, grads: dict, state: OptimizerState,
                   config: TrainConfig) -> OptimizerState:
    """In-place update of ``params`` (name -> Tensor) from ``grads`` (name -> array).

    Decoupled weight decay p <- p * (1 - lr * wd) is applied before the
    update, except to GeM exponents.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {name}")
    state.step += 1
    lr, wd = config.learning_rate, config.weight_decay
    for name, p in params.items():
        g = grads[name]
        x = p.data
        if wd and decays(name):
            x = x * (1 - lr * wd)
        if kind == "adadelta":
            sq, acc = state.slots.setdefault(name, (np.zeros_like(x), np.zeros_like(x)))
            sq = config.rho * sq + (1 - config.rho) * g * g
            delta = np.sqrt(acc + config.adadelta_eps) / np.sqrt(sq + config.adadelta_eps) * g
            acc = config.rho * acc + (1 - config.rho) * delta * delta
            state.slots[name] = (sq, acc)
            x = x - lr * delta
        elif kind == "adam":
            b1, b2 = config.betas
            m, v = state.slots.setdefault(name, (np.zeros_like(x), np.zeros_like(x)))
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            state.slots[name] = (m, v)
            m_hat = m / (1 - b1 ** state.step)
            v_hat = v / (1 - b2 ** state.step)
            x = x - lr * m_hat / (np.sqrt(v_hat) + config.adam_eps)
        else:
            raise ValidationError(f"unknown optimizer {kind!r}")
        p.data = x.astype(p.data.dtype, copy=False)
    return state


# loops ----------------------------------------------------------------------

def _dtype(config: TrainConfig):
    return np.dtype(config.dtype)


def batch_loss(model: Model, batch, weights) -> tuple[ad.Tape, ad.Tensor]:
    with ad.Tape() as tape:
        logits = forward(model, ad.Tensor(batch.data))
        loss = weighted_cross_entropy(logits, batch.labels, weights)
    return tape, loss


def train_epoch(model: Model, batches, weights, state: OptimizerState, config: TrainConfig) -> float:
    """One pass over ``batches``; returns the sample-weight-averaged loss."""
    if not batches:
        raise ValidationError("train_epoch needs at least one batch")
    names = list(model.params)
    params = model.parameters()
    total, norm = 0.0, 0.0
    for i, batch in enumerate(batches):
        try:
            tape, loss = batch_loss(model, batch, weights)
            grads = ad.backward(tape, loss, params)
            optimizer_step(config.optimizer, model.params, dict(zip(names, grads)), state, config)
        except NumericError as exc:
            raise NumericError(f"batch {i}: {exc}") from None
        w = float(np.asarray(weights)[batch.labels].sum())
        total += float(loss.data) * w
        norm += w
    return total / norm


def evaluate(model: Model, segments: list[Segment], weights, config: TrainConfig):
    """(weighted loss, macro-F1, predictions, labels) with deterministic batching."""
    batches = make_batches(segments, config.batch_size, config.pad_mode, None,
                           _dtype(config), config.fixed_length)
    total, norm = 0.0, 0.0
    preds, labels = [], []
    for batch in batches:
        logits = forward(model, ad.Tensor(batch.data))
        loss = weighted_cross_entropy(logits, batch.labels, weights)
        w = float(np.asarray(weights)[batch.labels].sum())
        total += float(loss.data) * w
        norm += w
        preds.append(np.argmax(logits.data, axis=1))
        labels.append(batch.labels)
    pred, lab = np.concatenate(preds), np.concatenate(labels)
    f1 = macro_f1(confusion_matrix(pred, lab, model.spec.n_classes))
    return total / norm, f1, pred, lab


@dataclass
class EarlyStopState:
    best_val_loss: float = math.inf
    best_epoch: int = 0
    best_parameters: dict | None = None
    epochs_since_improvement: int = 0

    def update(self, epoch: int, val_loss: float, model: Model) -> bool:
        """Record an epoch; True when it improved on the best loss."""
        if val_loss < self.best_val_loss - IMPROVEMENT:
            self.best_val_loss = val_loss
            self.best_epoch = epoch
            self.best_parameters = model.state()
            self.epochs_since_improvement = 0
            return True
        self.epochs_since_improvement = epoch - self.best_epoch
        return False


@dataclass
class History:
    rows: list = field(default_factory=list)  # (epoch, train_loss, val_loss, val_f1)
    best_epoch: int = 0
    best_val_loss: float = math.inf

    def __len__(self):
        return len(self.rows)

    def to_csv(self, header_comment: str | None = None) -> str:
        buf = io.StringIO()
        if header_comment:
            buf.write(f"# {header_comment}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "val_loss", "val_f1"])
        for epoch, tl, vl, vf in self.rows:
            w.writerow([epoch, repr(tl), "" if vl is None else repr(vl), "" if vf is None else repr(vf)])
        return buf.getvalue()


def fit(model: Model, train_set: list[Segment], val_set: list[Segment], config: TrainConfig,
        weights=None, on_epoch=None) -> tuple[Model, History]:
    """Train with per-epoch reshuffling; restore the lowest-validation-loss snapshot.

    Stops once ``epochs_since_improvement > patience``. With ``patience=None``
    every epoch runs and the final parameters are kept.
    """
    if config.patience is not None and not val_set:
        raise ValidationError("early stopping needs a validation set")
    k = model.spec.n_classes
    weights = class_weights(train_set, k) if weights is None else np.asarray(weights)
    dtype = _dtype(config)
    for p in model.parameters():
        p.data = p.data.astype(dtype, copy=False)
    state = OptimizerState(config.optimizer)
    stopper = EarlyStopState()
    history = History()
    for epoch in range(1, config.max_epochs + 1):
        rng = np.random.default_rng(derive_seed(config.seed, "shuffle", epoch))
        batches = make_batches(train_set, config.batch_size, config.pad_mode, rng, dtype,
                               config.fixed_length)
        train_loss = train_epoch(model, batches, weights, state, config)
        val_loss = val_f1 = None
        if val_set:
            val_loss, val_f1, _, _ = evaluate(model, val_set, weights, config)
            stopper.update(epoch, val_loss, model)
        history.rows.append((epoch, train_loss, val_loss, val_f1))
        _flag_negative_alpha(model, epoch)
        if on_epoch is not None:
            on_epoch(epoch, train_loss, val_loss, val_f1)
        if config.patience is not None and stopper.epochs_since_improvement > config.patience:
            break
    if config.patience is not None and stopper.best_parameters is not None:
        model.load_state(stopper.best_parameters)
        history.best_epoch, history.best_val_loss = stopper.best_epoch, stopper.best_val_loss
    elif history.rows:
        history.best_epoch = history.rows[-1][0]
        history.best_val_loss = history.rows[-1][2] if history.rows[-1][2] is not None else math.nan
    return model, history


def _flag_negative_alpha(model: Model, epoch: int) -> None:
    for name, p in model.params.items():
        if name.endswith(".alpha") and np.any(p.data < 0):
            log.warning("epoch %d: %s has %d negative exponents", epoch, name, int((p.data < 0).sum()))


def select_hyperparameters(candidates: list[TrainConfig], train_set, val_set, spec: ModelSpec):
    """Train one model per candidate; pick the best validation macro-F1 (first on ties).

    A candidate whose training fails scores -inf.
    """
    if not candidates:
        raise ValidationError("at least one candidate is required")
    scores = []
    for cand in candidates:
        try:
            model = build_model(spec, derive_seed(cand.seed, "init"), np.dtype(cand.dtype))
            model, _ = fit(model, train_set, val_set, cand)
            _, f1, _, _ = evaluate(model, val_set, class_weights(train_set, spec.n_classes), cand)
            scores.append(f1)
        except (TmdError, FloatingPointError) as exc:
            log.warning("candidate %s failed: %s", cand, exc)
            scores.append(-math.inf)
    best = int(np.argmax(scores))
    return candidates[best], scores
