"""SGD training with momentum, classic L2 weight decay, and validation-based
model selection.

The update is v <- mu*v + g + wd*theta; theta <- theta - lr*v, i.e. weight
decay is added into the gradient before the momentum buffer. Training is
bit-reproducible for a fixed seed: the shuffle stream, batch order, and
gradient reduction order are all deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import DomainError, ShapeError
from .models import (
    ModelConfig,
    ParameterSet,
    forward_logits,
    forward_with_leaves,
    init_parameters,
)
from .rng import derive_rng


@dataclass(frozen=True)
class OptimizerConfig:
    """lr_schedule is a list of (first epoch, learning rate) milestones."""

    lr_schedule: tuple[tuple[int, float], ...] = ((0, 1e-2),)
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 128
    max_epochs: int = 30
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(
            self, "lr_schedule", tuple((int(e), float(lr)) for e, lr in self.lr_schedule)
        )
        if not self.lr_schedule or any(lr <= 0 for _, lr in self.lr_schedule):
            raise DomainError("every scheduled learning rate must be positive")
        if sorted(e for e, _ in self.lr_schedule) != [e for e, _ in self.lr_schedule]:
            raise DomainError("lr_schedule epochs must be sorted")
        if not (0.0 <= self.momentum < 1.0):
            raise DomainError("momentum must be in [0, 1)")
        if self.weight_decay < 0.0:
            raise DomainError("weight decay must be >= 0")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise DomainError("batch_size and max_epochs must be >= 1")

    def lr_at(self, epoch: int) -> float:
        lr = self.lr_schedule[0][1]
        for start, value in self.lr_schedule:
            if epoch >= start:
                lr = value
        return lr


@dataclass
class TrainReport:
    train_loss: list[float]
    val_accuracy: list[float]
    selected_epoch: int
    params: ParameterSet


class MomentumState:
    """One velocity buffer per parameter tensor."""

    def __init__(self, params: ParameterSet):
        self.velocity = [
            (np.zeros_like(layer.weight), np.zeros_like(layer.bias)) for layer in params.layers
        ]


def sgd_step(
    params: ParameterSet,
    grads: list[tuple[np.ndarray, np.ndarray]],
    state: MomentumState,
    config: OptimizerConfig,
    lr: float | None = None,
) -> None:
    """One in-place update. grads holds (weight grad, bias grad) per layer."""
    if len(grads) != len(params.layers):
        raise ShapeError(f"{len(grads)} gradient pairs for {len(params.layers)} layers")
    step = config.lr_schedule[0][1] if lr is None else float(lr)
    for layer, (gw, gb), (vw, vb) in zip(params.layers, grads, state.velocity):
        if gw.shape != layer.weight.shape or gb.shape != layer.bias.shape:
            raise ShapeError(f"gradient shape mismatch at layer {layer.name}")
        vw *= config.momentum
        vw += gw + config.weight_decay * layer.weight
        vb *= config.momentum
        vb += gb + config.weight_decay * layer.bias
        layer.weight -= step * vw
        layer.bias -= step * vb


def nll_loss_and_grads(
    params: ParameterSet, xs: np.ndarray, ys: np.ndarray
) -> tuple[float, list[tuple[np.ndarray, np.ndarray]]]:
    """Mean negative log-likelihood over the batch and its parameter grads."""
    n = len(ys)
    if params.config.architecture == "mlp":
        logits, leaves = forward_with_leaves(params, xs)
        logp = ad.log_softmax(logits)
        loss = ad.scale(ad.sum_all(ad.pick_rows(logp, ys)), -1.0 / n)
    else:
        # conv forward handles one sample at a time; share the leaves so a
        # single backward accumulates the batch gradient deterministically
        from .models import _forward_parts, make_leaves  # noqa: PLC0415

        leaves = make_leaves(params)
        total = None
        for i in range(n):
            _, logits = _forward_parts(params, ad.Tensor(xs[i]), leaves)
            term = ad.pick_rows(ad.log_softmax(logits), [int(ys[i])])
            total = term if total is None else ad.add(total, term)
        loss = ad.scale(ad.sum_all(total), -1.0 / n)
    flat = [t for pair in leaves for t in pair]
    gs = ad.backward(loss, flat)
    grads = [(gs[2 * i], gs[2 * i + 1]) for i in range(len(leaves))]
    return float(loss.data.item()), grads


def evaluate(params: ParameterSet, data) -> tuple[float, float]:
    """(accuracy, mean NLL); argmax ties resolve to the lowest class index."""
    xs, ys = data.x, data.y
    if len(ys) == 0:
        raise DomainError("cannot evaluate on an empty dataset")
    C = params.config.num_classes
    if np.any(ys < 0) or np.any(ys >= C):
        raise DomainError(f"labels must lie in 0..{C - 1}")
    logp = _batch_log_proba(params, xs)
    pred = np.argmax(logp, axis=1)
    acc = float(np.mean(pred == ys))
    nll = float(-np.mean(logp[np.arange(len(ys)), ys]))
    return acc, nll


def _batch_log_proba(params: ParameterSet, xs: np.ndarray) -> np.ndarray:
    if params.config.architecture == "mlp":
        logits = forward_logits(params, xs).data
    else:
        logits = np.vstack([forward_logits(params, x).data for x in xs])
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def fit(config: ModelConfig, opt: OptimizerConfig, train, val) -> TrainReport:
    """Minimize mean NLL; keep the epoch with the best validation accuracy
    (earliest epoch on ties)."""
    if len(train) == 0 or len(val) == 0:
        raise DomainError("train and validation sets must be non-empty")
    present = np.unique(train.y)
    expected = np.arange(config.num_classes)
    if not np.array_equal(np.intersect1d(present, expected), expected):
        raise DomainError("every class needs at least one training sample")

    params = init_parameters(config, opt.seed)
    state = MomentumState(params)
    shuffle = derive_rng(opt.seed, "shuffle")
    n = len(train)

    losses: list[float] = []
    accs: list[float] = []
    best_acc = -1.0
    best_epoch = -1
    best_params = params.copy()
    for epoch in range(opt.max_epochs):
        lr = opt.lr_at(epoch)
        perm = shuffle.permutation(n)
        total = 0.0
        for lo in range(0, n, opt.batch_size):
            idx = perm[lo : lo + opt.batch_size]
            loss, grads = nll_loss_and_grads(params, train.x[idx], train.y[idx])
            sgd_step(params, grads, state, opt, lr)
            total += loss * len(idx)
        losses.append(total / n)
        acc, _ = evaluate(params, val)
        accs.append(acc)
        if acc > best_acc:
            best_acc = acc
            best_epoch = epoch
            best_params = params.copy()
    return TrainReport(losses, accs, best_epoch, best_params)
