"""Cross-entropy objective, Adam with L2 weight decay, and early-stopped training."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields
from typing import Callable

import numpy as np

from . import tensor as T
from .data import DataError, DatasetSplit, DialogueBatch, make_batches
from .metrics import EvaluationReport, weighted_f1
from .model import CMRobertaModel
from .tensor import NumericalError, Tensor


class ConfigError(ValueError):
    """Invalid training or run configuration."""


class NumericalDivergence(NumericalError):
    def __init__(self, epoch: int, message: str):
        super().__init__(f"epoch {epoch}: {message}")
        self.epoch = epoch


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    weight_decay: float = 3e-4
    batch_size: int = 32
    max_epochs: int = 200
    patience: int = 15
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    decoupled_weight_decay: bool = False
    clip_norm: float | None = None

    def __post_init__(self):
        for name in ("learning_rate", "adam_eps", "batch_size", "max_epochs", "patience"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay must be non-negative, got {self.weight_decay}")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ConfigError("beta1 and beta2 must lie in (0, 1)")
        if self.patience > self.max_epochs:
            raise ConfigError(f"patience {self.patience} exceeds max_epochs {self.max_epochs}")
        if self.clip_norm is not None and self.clip_norm <= 0:
            raise ConfigError("clip_norm must be positive when set")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        extra = set(d) - {f.name for f in fields(cls)}
        if extra:
            raise ConfigError(f"unknown training config keys: {sorted(extra)}")
        return cls(**d)


# -- objective ----------------------------------------------------------------

def cross_entropy(logits: Tensor, labels, mask=None) -> Tensor:
    """Mean ``-log softmax(logits)[label]`` over valid positions.

    ``logits`` is ``[T, C]`` or ``[B, T, C]``; ``labels`` and ``mask`` match the
    leading axes. Padded positions may hold any label.
    """
    labels = np.asarray(labels)
    C = logits.shape[-1]
    if labels.shape != logits.shape[:-1]:
        raise DataError(f"labels {labels.shape} do not match logits {logits.shape}")
    valid = np.ones(labels.shape, dtype=bool) if mask is None else np.asarray(mask) > 0
    bad = valid & ((labels < 0) | (labels >= C))
    if bad.any():
        pos = tuple(int(i) for i in np.argwhere(bad)[0])
        raise DataError(f"label {labels[pos]} at position {list(pos)} outside [0, {C})")
    n = int(valid.sum())
    if n == 0:
        raise DataError("no valid positions to average over")
    picked = T.take_last(T.log_softmax(logits), np.where(valid, labels, 0))
    return T.scale(T.sum(T.mul(picked, Tensor(valid / n))), -1.0)


# -- optimiser ------------------------------------------------------------------

@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0

    @classmethod
    def zeros_like(cls, params: dict[str, np.ndarray]) -> "AdamState":
        return cls({k: np.zeros_like(p) for k, p in params.items()},
                   {k: np.zeros_like(p) for k, p in params.items()}, 0)

    def copy(self) -> "AdamState":
        return AdamState({k: a.copy() for k, a in self.m.items()},
                         {k: a.copy() for k, a in self.v.items()}, self.t)


def adam_step(state: AdamState, params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
              config: TrainConfig) -> dict[str, np.ndarray]:
    """One bias-corrected Adam update, in place; returns ``params``.

    Weight decay is added to the gradient (classic L2) unless
    ``config.decoupled_weight_decay`` is set, in which case it shrinks the
    parameters directly.
    """
    if not state.m:
        fresh = AdamState.zeros_like(params)
        state.m, state.v = fresh.m, fresh.v
    state.t += 1
    lr, b1, b2, wd = config.learning_rate, config.beta1, config.beta2, config.weight_decay
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, theta in params.items():
        g = grads[name]
        if wd and not config.decoupled_weight_decay:
            g = g + wd * theta
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = lr * (m / c1) / (np.sqrt(v / c2) + config.adam_eps)
        if wd and config.decoupled_weight_decay:
            update = update + lr * wd * theta
        theta -= update
    return params


def _clip(grads: dict[str, np.ndarray], max_norm: float) -> None:
    norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if norm > max_norm:
        for g in grads.values():
            g *= max_norm / norm


# -- training loop ----------------------------------------------------------------

@dataclass
class TrainReport:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    val_f1: list[float] = field(default_factory=list)
    best_epoch: int = 0    # 1-based
    stop_epoch: int = 0
    stop_reason: str = ""  # "patience" or "max_epochs"

    @property
    def epochs(self) -> int:
        return len(self.train_loss)

    def to_dict(self) -> dict:
        return {**asdict(self), "epochs": self.epochs}

    @classmethod
    def from_dict(cls, d: dict) -> "TrainReport":
        return cls(**{k: v for k, v in d.items() if k != "epochs"})


class EarlyStopping:
    """Stops once ``patience`` consecutive epochs fail to strictly lower the best loss."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = math.inf
        self.best_epoch = 0
        self.bad_epochs = 0

    def update(self, epoch: int, loss: float) -> bool:
        """Record ``loss`` for ``epoch``; returns True when training should stop."""
        if loss < self.best:
            self.best, self.best_epoch, self.bad_epochs = loss, epoch, 0
        else:
            self.bad_epochs += 1
        return self.bad_epochs >= self.patience

    @property
    def improved(self) -> bool:
        return self.bad_epochs == 0


def _batch_loss(model: CMRobertaModel, batch: DialogueBatch) -> Tensor:
    return cross_entropy(model(batch.audio, batch.text, batch.mask), batch.labels, batch.mask)


def epoch_seed(seed: int, epoch: int) -> int:
    return int(np.random.SeedSequence([seed, epoch]).generate_state(1)[0])


def evaluate_split(model: CMRobertaModel, split: DatasetSplit,
                   batch_size: int = 32) -> tuple[float, EvaluationReport]:
    """Mean validation loss and the metric report, without touching gradients."""
    total, preds, labels = 0.0, [], []
    with T.no_grad():
        for batch in make_batches(split, batch_size):
            logits = model(batch.audio, batch.text, batch.mask)
            total += float(cross_entropy(logits, batch.labels, batch.mask).data) * batch.n_valid
            valid = batch.mask > 0
            preds.append(logits.data.argmax(axis=-1)[valid])
            labels.append(batch.labels[valid])
    n = split.n_utterances
    report = weighted_f1(np.concatenate(preds), np.concatenate(labels), split.n_classes, split.label_names)
    return total / n, report


def evaluate(model: CMRobertaModel, split: DatasetSplit, batch_size: int = 32) -> EvaluationReport:
    """Argmax predictions on every valid utterance, scored with weighted F1."""
    return evaluate_split(model, split, batch_size)[1]


@dataclass
class FitResult:
    report: TrainReport
    adam: AdamState


def fit(model: CMRobertaModel, train: DatasetSplit, val: DatasetSplit, config: TrainConfig,
        val_loss_fn: Callable[[CMRobertaModel, DatasetSplit], tuple[float, float]] | None = None,
        log: Callable[[str], None] | None = None) -> FitResult:
    """Mini-batch Adam training with validation-loss early stopping.

    Dialogues are reshuffled every epoch from ``(config.seed, epoch)``. At the
    end the parameters and optimiser state of the best epoch are restored.
    ``val_loss_fn(model, val)`` returns ``(loss, weighted_f1)`` and defaults
    to :func:`evaluate_split`.
    """
    if not train.dialogues or not val.dialogues:
        raise ConfigError("training and validation splits must be non-empty")
    params = dict(model.named_parameters())
    state = AdamState.zeros_like({k: p.data for k, p in params.items()})
    stopper = EarlyStopping(config.patience)
    report = TrainReport()
    best_params = {k: p.data.copy() for k, p in params.items()}
    best_state = state.copy()

    if val_loss_fn is None:
        def val_loss_fn(m, split):
            loss, rep = evaluate_split(m, split, config.batch_size)
            return loss, rep.weighted_f1

    for epoch in range(1, config.max_epochs + 1):
        total = 0.0
        for batch in make_batches(train, config.batch_size, seed=epoch_seed(config.seed, epoch)):
            model.zero_grad()
            loss = _batch_loss(model, batch)
            value = float(loss.data)
            if not math.isfinite(value):
                raise NumericalDivergence(epoch, f"non-finite training loss {value}")
            loss.backward()
            grads = {k: p.grad if p.grad is not None else np.zeros_like(p.data) for k, p in params.items()}
            if config.clip_norm is not None:
                _clip(grads, config.clip_norm)
            adam_step(state, {k: p.data for k, p in params.items()}, grads, config)
            total += value * batch.n_valid
        vloss, vf1 = val_loss_fn(model, val)
        if not math.isfinite(vloss):
            raise NumericalDivergence(epoch, f"non-finite validation loss {vloss}")
        report.train_loss.append(total / train.n_utterances)
        report.val_loss.append(float(vloss))
        report.val_f1.append(float(vf1))
        stop = stopper.update(epoch, vloss)
        if stopper.improved:
            best_params = {k: p.data.copy() for k, p in params.items()}
            best_state = state.copy()
        if log:
            log(f"epoch {epoch}: train {report.train_loss[-1]:.4f} val {vloss:.4f} f1 {vf1:.4f}")
        if stop:
            report.stop_reason = "patience"
            break
    else:
        report.stop_reason = "max_epochs"

    report.stop_epoch = report.epochs
    report.best_epoch = stopper.best_epoch
    for k, p in params.items():
        p.data[...] = best_params[k]
    model.zero_grad()
    return FitResult(report, best_state)
