"""SGD with momentum, per-epoch learning-rate decay and the training loop."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .data import AugmentPolicy, ImbalancedSampler, ShuffleSampler, augment_batch
from .metrics import EvalReport, evaluate
from .model import FerModel, model_forward
from .tensor import Tensor

logger = logging.getLogger(__name__)


@dataclass
class SgdState:
    lr_backbone: float = 1e-4
    lr_heads: float = 1e-3
    momentum: float = 0.9
    weight_decay: float = 1e-3
    decay_factor: float = 0.95
    velocity: dict[str, np.ndarray] = field(default_factory=dict)
    epoch: int = 0

    def __post_init__(self):
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if self.lr_backbone <= 0 or self.lr_heads <= 0:
            raise ValueError("learning rates must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight decay must be non-negative")
        if not 0.0 < self.decay_factor <= 1.0:
            raise ValueError("decay factor must lie in (0, 1]")


def model_param_specs(model: FerModel) -> list[tuple[str, Tensor, str, bool]]:
    """``(name, tensor, group, decays)`` for every trainable tensor."""
    return [(name, p, model.group_of(name), model.decays(name)) for name, p in model.named_parameters()]


def sgd_step(state: SgdState, params: Iterable[tuple[str, Tensor, str, bool]]) -> None:
    """Heavy-ball update v <- mu*v + g + wd*theta; theta <- theta - lr*v; then clears grads."""
    params = list(params)
    for name, p, _, _ in params:
        if p.grad is None:
            raise ValueError(f"trainable parameter {name!r} has no gradient")
    for name, p, group, decays in params:
        lr = state.lr_backbone if group == "backbone" else state.lr_heads
        g = p.grad + state.weight_decay * p.data if decays and state.weight_decay else p.grad
        v = state.velocity.get(name)
        if v is None:
            v = np.zeros_like(p.data)
        v = state.momentum * v + g
        state.velocity[name] = v
        p.data -= lr * v
        p.grad = None


def lr_at_epoch(lr0: float, epoch: int, factor: float = 0.95) -> float:
    if epoch < 0:
        raise ValueError("epoch must be non-negative")
    return lr0 * factor ** epoch


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 64
    lr_backbone: float = 1e-4
    lr_heads: float = 1e-3
    momentum: float = 0.9
    weight_decay: float = 1e-3
    lr_decay: float = 0.95
    sampler: str = "imbalanced"
    augment: AugmentPolicy | None = field(default_factory=AugmentPolicy)
    seed: int = 0

    def make_state(self) -> SgdState:
        return SgdState(self.lr_backbone, self.lr_heads, self.momentum, self.weight_decay, self.lr_decay)


@dataclass
class EpochStats:
    loss: float
    loss_u: float
    loss_l: float
    accuracy: float
    steps: int


@dataclass
class HistoryRow:
    epoch: int
    lr_backbone: float
    lr_heads: float
    loss: float
    loss_u: float
    loss_l: float
    train_acc: float
    val_f1: float
    val_acc: float
    val_overall: float

    def to_tsv(self) -> str:
        values = [str(self.epoch)] + [repr(float(v)) for v in (
            self.lr_backbone, self.lr_heads, self.loss, self.loss_u, self.loss_l,
            self.train_acc, self.val_f1, self.val_acc, self.val_overall)]
        return "\t".join(values)


@dataclass
class FitResult:
    history: list[HistoryRow]
    best_state: dict[str, np.ndarray]
    best_epoch: int | None
    best_report: EvalReport | None
    state: SgdState
    rng_state: dict = field(default_factory=dict)

    def history_tsv(self) -> str:
        return "".join(row.to_tsv() + "\n" for row in self.history)


def make_sampler(kind: str, labels, rng: np.random.Generator):
    if kind == "imbalanced":
        return ImbalancedSampler(labels, rng)
    if kind == "shuffle":
        return ShuffleSampler(len(labels), rng)
    raise ValueError(f"unknown sampler {kind!r} (expected 'imbalanced' or 'shuffle')")


def train_epoch(model: FerModel, images: np.ndarray, labels, sampler, batch_size: int,
                state: SgdState, rng: np.random.Generator | None = None,
                policy: AugmentPolicy | None = None) -> EpochStats:
    """One pass of ceil(N / batch_size) SGD steps over batches drawn from ``sampler``."""
    labels = np.asarray(labels, dtype=np.int64)
    n = len(labels)
    if n == 0:
        raise ValueError("cannot train on an empty dataset")
    if batch_size < 1:
        raise ValueError("batch size must be positive")
    order = sampler.draw(n)
    specs = model_param_specs(model)
    totals = np.zeros(3)
    correct = 0
    steps = math.ceil(n / batch_size)
    for step in range(steps):
        idx = order[step * batch_size:(step + 1) * batch_size]
        x = images[idx]
        if policy is not None and rng is not None:
            x = augment_batch(x, rng, policy)
        y = labels[idx]
        out = model_forward(model, x, y, training=True)
        out.loss.backward()
        sgd_step(state, specs)
        totals += len(idx) * np.array([out.loss.item(), out.loss_u.item(), out.loss_l.item()])
        correct += int(np.sum(np.argmax(out.logits_u.data, axis=1) == y))
    totals /= n
    return EpochStats(float(totals[0]), float(totals[1]), float(totals[2]), correct / n, steps)


def fit(model: FerModel, train: tuple[np.ndarray, np.ndarray],
        val: tuple[np.ndarray, np.ndarray] | None = None, epochs: int | None = None,
        config: TrainConfig | None = None, state: SgdState | None = None) -> FitResult:
    """Train for ``epochs`` epochs, scoring ``val`` (``train`` if absent) after each.

    The model ends holding the parameters of the best-scoring epoch.
    """
    config = config or TrainConfig()
    epochs = config.epochs if epochs is None else epochs
    images, labels = train
    val_images, val_labels = val if val is not None else train
    rng = np.random.default_rng(config.seed)
    sampler = make_sampler(config.sampler, labels, rng)
    state = state or config.make_state()

    history: list[HistoryRow] = []
    best_state = model.state_dict()
    best_epoch, best_report = None, None
    for epoch in range(epochs):
        state.epoch = epoch
        state.lr_backbone = lr_at_epoch(config.lr_backbone, epoch, config.lr_decay)
        state.lr_heads = lr_at_epoch(config.lr_heads, epoch, config.lr_decay)
        stats = train_epoch(model, images, labels, sampler, config.batch_size, state, rng, config.augment)
        report = evaluate(model, val_images, val_labels)
        history.append(HistoryRow(epoch, state.lr_backbone, state.lr_heads, stats.loss, stats.loss_u,
                                  stats.loss_l, stats.accuracy, report.macro_f1, report.accuracy,
                                  report.overall))
        logger.info("epoch %d loss %.4f train_acc %.3f val_overall %.4f",
                    epoch, stats.loss, stats.accuracy, report.overall)
        if best_report is None or report.overall > best_report.overall:
            best_state, best_epoch, best_report = model.state_dict(), epoch, report
    if best_epoch is not None:
        model.load_state_dict(best_state)
    return FitResult(history, best_state, best_epoch, best_report, state, rng.bit_generator.state)
