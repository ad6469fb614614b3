"""Deterministic mini-batch training with Adam and cosine learning-rate decay."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from tmur.datasets import MultiViewDataset, stratified_split
from tmur.engine import Tape, stable_hash
from tmur.evaluation import MetricsReport, evaluate, predictions
from tmur.model import ModelConfig, Standardizer, TMURModel
from tmur.objectives import LossBreakdown, LossWeights, total_loss

log = logging.getLogger(__name__)

PROTOCOL_SEEDS = (3407, 7, 601, 101, 503)


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, batch: int, breakdown: LossBreakdown):
        bad = [k for k, v in breakdown.as_dict().items() if not math.isfinite(v)]
        super().__init__(f"non-finite loss at epoch {epoch}, batch {batch}: components {bad}")
        self.epoch, self.batch, self.components = epoch, batch, bad


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 300
    batch_size: int = 128
    base_lr: float = 1e-3
    seed: int = 3407
    weights: LossWeights = field(default_factory=LossWeights)
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    split_ratio: float = 0.8
    bins: int = 15
    track_test: bool = True

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or not self.base_lr > 0:
            raise ValueError("epochs, batch_size must be >= 1 and base_lr > 0")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainReport:
    losses: list[LossBreakdown]
    train_accuracy: list[float]
    test_accuracy: list[float]
    wall_time: float
    final: MetricsReport
    best_test_accuracy: float
    best_epoch: int
    train_index: np.ndarray
    test_index: np.ndarray


def rng_for(seed: int, purpose: str, *extra: int) -> np.random.Generator:
    """Independent generator stream per (seed, purpose)."""
    return np.random.default_rng([seed, stable_hash(purpose), *extra])


def cosine_lr(step: int, total_steps: int, base_lr: float) -> float:
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    if total_steps == 0:
        return base_lr
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))


class Adam:
    def __init__(self, params, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self, lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def adam_step(params, state: Adam, lr: float) -> None:
    """One Adam update of ``params`` using their accumulated gradients."""
    if state.params != list(params):
        raise ValueError("optimizer state belongs to a different parameter list")
    state.step(lr)


def prepare_split(ds: MultiViewDataset, seed: int, ratio: float = 0.8):
    """Split and standardise; returns ``(standardizer, train views, train labels, test views, test labels, indices)``."""
    train_idx, test_idx = stratified_split(ds.labels, ratio, seed)
    train, test = ds.subset(train_idx), ds.subset(test_idx)
    std = Standardizer.fit(train.views)
    return std, std.transform(train.views), train.labels, std.transform(test.views), test.labels, (train_idx, test_idx)


def fit(model: TMURModel, ds: MultiViewDataset, config: TrainConfig) -> TrainReport:
    """Train ``model`` in place on the stratified training split of ``ds``."""
    if ds.view_dims != model.config.view_dims or ds.num_classes != model.config.num_classes:
        raise ValueError(
            f"dataset dims {ds.view_dims}/K={ds.num_classes} do not match model "
            f"{model.config.view_dims}/K={model.config.num_classes}"
        )
    start = time.perf_counter()
    std, x_train, y_train, x_test, y_test, (train_idx, test_idx) = prepare_split(ds, config.seed, config.split_ratio)
    model.standardizer = std
    model.meta = {"split_seed": config.seed, "split_ratio": config.split_ratio}
    n = y_train.shape[0]
    batches_per_epoch = math.ceil(n / config.batch_size)
    total_steps = config.epochs * batches_per_epoch
    opt = Adam(model.parameters(), config.beta1, config.beta2, config.adam_eps)
    shuffle_rng = rng_for(config.seed, "shuffle")

    losses, train_acc, test_acc = [], [], []
    step = 0
    for epoch in range(config.epochs):
        order = shuffle_rng.permutation(n)
        sums = np.zeros(5)
        for b in range(batches_per_epoch):
            idx = order[b * config.batch_size : (b + 1) * config.batch_size]
            batch = [x[idx] for x in x_train]
            model.zero_grad()
            with Tape() as tape:
                out = model.forward(batch)
                loss, parts = total_loss(out, y_train[idx], config.weights)
            if not all(math.isfinite(v) for v in parts.as_dict().values()):
                raise TrainingDiverged(epoch, b, parts)
            tape.backward(loss)
            opt.step(cosine_lr(step, total_steps, config.base_lr))
            step += 1
            sums += len(idx) * np.array([parts.fused, parts.view, parts.bal, parts.div, parts.total])
        losses.append(LossBreakdown(*(sums / n)))
        train_acc.append(_accuracy(model, x_train, y_train))
        test_acc.append(_accuracy(model, x_test, y_test) if config.track_test else float("nan"))
        log.debug("epoch %d loss %.6f train %.4f test %.4f", epoch, losses[-1].total, train_acc[-1], test_acc[-1])

    final = evaluate(predictions(model, x_test, y_test), config.bins)
    if config.track_test:
        best_epoch = int(np.argmax(test_acc))
        best = float(test_acc[best_epoch])
    else:
        best_epoch, best = config.epochs - 1, final.accuracy
    return TrainReport(
        losses, train_acc, test_acc, time.perf_counter() - start, final, best, best_epoch, train_idx, test_idx
    )


def _accuracy(model: TMURModel, views, labels) -> float:
    pred, _, _ = model.predict(views)
    return float((pred == labels).mean())


def build_and_fit(ds: MultiViewDataset, model_config: ModelConfig, train_config: TrainConfig):
    model = TMURModel(model_config, seed=train_config.seed)
    return model, fit(model, ds, train_config)
