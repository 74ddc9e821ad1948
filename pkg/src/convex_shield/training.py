"""Losses, Adam, dataset splitting and the mini-batch training loop."""

from __future__ import annotations

import csv
import json
import logging
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from sklearn.model_selection import ShuffleSplit, StratifiedShuffleSplit

from . import autodiff as ad
from .autodiff import Tape

log = logging.getLogger(__name__)

LOSSES = ("mse", "asymmetric")


class TrainingAborted(RuntimeError):
    """Raised when a gradient or loss becomes non-finite."""


@dataclass
class TrainConfig:
    learning_rate: float = 3e-4
    batch_size: int = 2**16
    epochs: int = 500
    seed: int = 0
    loss: str = "mse"
    asymmetric_weight: float = 10.0
    checkpoint_every: int = 50

    def __post_init__(self):
        if self.loss not in LOSSES:
            raise ValueError(f"loss must be one of {LOSSES}, got {self.loss!r}")
        if not self.learning_rate > 0 or self.batch_size < 1 or self.epochs < 0:
            raise ValueError("learning_rate and batch_size must be positive, epochs non-negative")
        if self.checkpoint_every < 1 or not self.asymmetric_weight > 0:
            raise ValueError("checkpoint_every and asymmetric_weight must be positive")

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, obj: dict) -> "TrainConfig":
        unknown = set(obj) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown TrainConfig fields: {sorted(unknown)}")
        return cls(**obj)


@dataclass
class Dataset:
    inputs: np.ndarray
    targets: np.ndarray
    strata: np.ndarray | None = None
    input_names: list[str] = field(default_factory=list)
    target_names: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.inputs = np.atleast_2d(np.asarray(self.inputs, dtype=np.float64))
        self.targets = np.asarray(self.targets, dtype=np.float64)
        if self.targets.ndim == 1:
            self.targets = self.targets[:, None]
        if len(self.inputs) != len(self.targets):
            raise ValueError("inputs and targets differ in length")
        if not (np.all(np.isfinite(self.inputs)) and np.all(np.isfinite(self.targets))):
            raise ValueError("dataset contains non-finite values")
        if self.strata is not None:
            self.strata = np.asarray(self.strata, dtype=int)
            if len(self.strata) != len(self.inputs):
                raise ValueError("strata length differs from inputs")
        if not self.input_names:
            self.input_names = [f"x{i}" for i in range(self.inputs.shape[1])]
        if not self.target_names:
            self.target_names = [f"y{i}" for i in range(self.targets.shape[1])]

    def __len__(self):
        return len(self.inputs)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(
            self.inputs[idx],
            self.targets[idx],
            None if self.strata is None else self.strata[idx],
            list(self.input_names),
            list(self.target_names),
        )

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            header = self.input_names + self.target_names
            if self.strata is not None:
                header.append("stratum")
            writer.writerow(header)
            for i in range(len(self)):
                row = [repr(float(v)) for v in self.inputs[i]] + [repr(float(v)) for v in self.targets[i]]
                if self.strata is not None:
                    row.append(str(int(self.strata[i])))
                writer.writerow(row)

    @classmethod
    def from_csv(cls, path, n_inputs: int) -> "Dataset":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        header, body = rows[0], rows[1:]
        has_strata = header[-1] == "stratum"
        n_cols = len(header) - int(has_strata)
        data = np.array([[float(v) for v in r[:n_cols]] for r in body]).reshape(len(body), n_cols)
        strata = np.array([int(r[-1]) for r in body]) if has_strata else None
        return cls(
            data[:, :n_inputs],
            data[:, n_inputs:],
            strata,
            header[:n_inputs],
            header[n_inputs:n_cols],
        )


def split_dataset(ds: Dataset, train_fraction: float = 0.8, seed: int = 0) -> tuple[Dataset, Dataset]:
    """Shuffled train/test split, stratified when strata are present."""
    if not 0 < train_fraction < 1:
        raise ValueError("train_fraction must lie in (0, 1)")
    splitter = ShuffleSplit(n_splits=1, train_size=train_fraction, random_state=seed)
    if ds.strata is not None:
        _, counts = np.unique(ds.strata, return_counts=True)
        if counts.min() < 2:
            warnings.warn("a stratum has fewer than 2 samples; falling back to an unstratified split")
        else:
            splitter = StratifiedShuffleSplit(n_splits=1, train_size=train_fraction, random_state=seed)
    train_idx, test_idx = next(splitter.split(ds.inputs, ds.strata))
    return ds.subset(np.sort(train_idx)), ds.subset(np.sort(test_idx))


# -- losses -------------------------------------------------------------------


def loss_mse(pred, target) -> float:
    pred, target = np.asarray(pred, float), np.asarray(target, float)
    return float(np.mean((pred - target) ** 2))


def asymmetric_weights(pred, target, weight: float = 10.0) -> np.ndarray:
    """Per-coordinate weights: under-shooting the optimal score or over-shooting another costs more."""
    pred, target = np.atleast_2d(pred), np.atleast_2d(target)
    best = np.argmax(target, axis=1)  # first maximum on ties
    is_best = np.zeros(target.shape, dtype=bool)
    is_best[np.arange(len(target)), best] = True
    heavy = (is_best & (pred < target)) | (~is_best & (pred > target))
    return np.where(heavy, weight, 1.0)


def loss_asymmetric(pred_scores, target_scores, weight: float = 10.0) -> float:
    pred, target = np.asarray(pred_scores, float), np.asarray(target_scores, float)
    if pred.shape[-1] != 9 or target.shape[-1] != 9:
        raise ValueError("asymmetric loss expects 9 advisory scores")
    w = asymmetric_weights(pred, target, weight)
    return float(np.mean(np.sum(w * (np.atleast_2d(pred) - np.atleast_2d(target)) ** 2, axis=1)))


def batch_loss(pred, target: np.ndarray, config: TrainConfig):
    """Mean loss over a batch; ``pred`` may be a tape node."""
    diff = pred - target
    if config.loss == "mse":
        return ad.mean(ad.square(diff))
    if target.shape[1] != 9:
        raise ValueError("asymmetric loss expects 9 advisory scores")
    w = asymmetric_weights(ad.value_of(pred), target, config.asymmetric_weight)
    return ad.sum(w * ad.square(diff)) * (1.0 / len(target))


# -- optimiser ----------------------------------------------------------------


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, n: int) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n), 0)


def adam_step(params, grads, state: AdamState, lr=3e-4, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update. Returns new params and new state."""
    params = np.asarray(params, dtype=np.float64)
    grads = np.asarray(grads, dtype=np.float64)
    if params.shape != grads.shape or state.m.shape != params.shape:
        raise ValueError("params, grads and optimiser state must be aligned")
    if not np.all(np.isfinite(grads)):
        raise TrainingAborted("non-finite gradient")
    t = state.t + 1
    m = beta1 * state.m + (1 - beta1) * grads
    v = beta2 * state.v + (1 - beta2) * grads * grads
    m_hat = m / (1 - beta1**t)
    v_hat = v / (1 - beta2**t)
    return params - lr * m_hat / (np.sqrt(v_hat) + eps), AdamState(m, v, t)


# -- training loop ------------------------------------------------------------


def loss_and_grad(model, x, y, config: TrainConfig, cache=None) -> tuple[float, np.ndarray]:
    tape = Tape()
    leaves = model.params.watch(tape)
    pred = model.forward(x, leaves, cache)
    loss = batch_loss(pred, y, config)
    return float(loss.value), model.params.flat_gradient(tape.backward(loss), leaves)


def evaluate_loss(model, ds: Dataset, config: TrainConfig, cache=None) -> float:
    pred = model.forward(ds.inputs, None, cache)
    return float(batch_loss(pred, ds.targets, config))


@dataclass
class EpochMetrics:
    epoch: int
    loss: float
    accuracy: float
    violations: int


def train(
    model,
    ds: Dataset,
    config: TrainConfig,
    callbacks: Sequence[Callable] = (),
    metric: Callable | None = None,
    violations: Callable | None = None,
) -> tuple[object, list[EpochMetrics]]:
    """Mini-batch Adam over every parameter of ``model`` (network and proximity).

    ``metric(model) -> float`` and ``violations(model) -> int`` are evaluated
    at epoch 0 (initialisation), every ``checkpoint_every`` epochs and at the
    final epoch; other epochs repeat the last value. ``callbacks`` receive
    ``(epoch, model, metrics)`` after each epoch.
    """
    rng = np.random.default_rng(config.seed)
    n = len(ds)
    batch = min(config.batch_size, n)
    cache = model.precompute(ds.inputs)
    state = AdamState.zeros(model.params.size)
    history: list[EpochMetrics] = []

    def record(epoch, loss):
        check = epoch == 0 or epoch == config.epochs or epoch % config.checkpoint_every == 0
        if check or not history:
            acc = metric(model) if metric else float("nan")
            bad = int(violations(model)) if violations else 0
        else:
            acc, bad = history[-1].accuracy, history[-1].violations
        history.append(EpochMetrics(epoch, loss, acc, bad))
        for cb in callbacks:
            cb(epoch, model, history[-1])

    record(0, evaluate_loss(model, ds, config, cache))
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, batch):
            idx = np.sort(order[start : start + batch])
            sub_cache = None if cache is None else cache[idx]
            loss, grad = loss_and_grad(model, ds.inputs[idx], ds.targets[idx], config, sub_cache)
            if not np.isfinite(loss):
                raise TrainingAborted(f"non-finite loss at epoch {epoch}")
            try:
                new, state = adam_step(model.params.values, grad, state, config.learning_rate)
            except TrainingAborted as exc:
                raise TrainingAborted(f"epoch {epoch}: {exc}") from exc
            model.params.values[:] = new
            total += loss * len(idx)
        record(epoch, total / n)
        if epoch % config.checkpoint_every == 0:
            log.info("epoch %d loss %.6g", epoch, history[-1].loss)
    return model, history


def write_metrics_csv(history: Sequence[EpochMetrics], path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "loss", "accuracy", "violations"])
        for h in history:
            writer.writerow([h.epoch, repr(float(h.loss)), repr(float(h.accuracy)), h.violations])


def load_config(path) -> TrainConfig:
    return TrainConfig.from_json(json.loads(Path(path).read_text()))
