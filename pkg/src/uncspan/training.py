"""Minibatch SGD for standard and PGD adversarial training."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import nn
from .attacks import AttackConfig, adapter_prediction, attack_rows, pgd_batch, prediction
from .data import LabeledDataset
from .errors import ConfigError, InputError, NumericalError, TrainingDiverged
from .nn import LossAdapter, ModelParams

MODES = ("standard", "adversarial")


def inner_attack_config(epsilon, steps=10) -> AttackConfig:
    """PGD used inside adversarial training: no random start, step 2.5*eps/steps."""
    return AttackConfig(epsilon=epsilon, steps=steps, random_start=False)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    batch_size: int = 256
    learning_rate: float = 0.05
    momentum: float = 0.9
    seed: int = 0
    mode: str = "standard"
    inner_attack: Optional[AttackConfig] = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}", field="mode")
        if self.mode == "adversarial" and self.inner_attack is None:
            raise ConfigError("adversarial mode requires an inner attack", field="inner_attack")
        if self.epochs < 0:
            raise ConfigError("must be >= 0", field="epochs")
        if self.batch_size < 1:
            raise ConfigError("must be >= 1", field="batch_size")
        if not self.learning_rate >= 0:
            raise ConfigError("must be >= 0", field="learning_rate")
        if not 0 <= self.momentum < 1:
            raise ConfigError("must be in [0, 1)", field="momentum")


def train(init: ModelParams, data: LabeledDataset, cfg: TrainConfig):
    """Train from ``init``; returns ``(params, log)``.

    ``log`` has one dict per epoch with keys ``epoch``, ``mean_loss`` (mean
    cross-entropy over the possibly perturbed batches) and ``clean_acc``
    (training-set accuracy after the epoch). In adversarial mode every batch
    is replaced by its inner-PGD perturbation before the gradient step.
    """
    if len(data) == 0:
        raise InputError("empty training set")
    if data.dim != init.input_dim:
        raise InputError(f"data dimension {data.dim} != model dimension {init.input_dim}")
    if data.labels.max() >= init.num_classes:
        raise InputError("training labels exceed the model's class count")

    params = ModelParams(tuple((w.copy(), b.copy()) for w, b in init.layers), init.activations)
    velocity = [(np.zeros_like(w), np.zeros_like(b)) for w, b in params.layers]
    X, y = data.features, data.labels
    n = len(y)
    rng = np.random.default_rng(cfg.seed)
    adversarial = cfg.mode == "adversarial"
    lr, mu = cfg.learning_rate, cfg.momentum
    log = []

    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            xb, yb = X[idx], y[idx]
            if adversarial:
                res = pgd_batch(params, xb, adapter_prediction(yb), cfg.inner_attack, row_ids=idx)
                xb = xb + res.delta
            try:
                logit, acts, pre = nn._forward_cache(params, xb)
            except NumericalError:
                raise TrainingDiverged(epoch) from None
            probs = nn.softmax(logit)
            loss, dz = LossAdapter("negative_class_logprob", yb).value_and_dlogits(probs)
            batch_loss = loss.mean()
            if not np.isfinite(batch_loss):
                raise TrainingDiverged(epoch)
            total += batch_loss * len(idx)
            grads, _ = nn._backward(params, acts, pre, dz / len(idx))
            for (w, b), (vw, vb), (gw, gb) in zip(params.layers, velocity, grads):
                vw *= mu
                vw += gw
                vb *= mu
                vb += gb
                w -= lr * vw
                b -= lr * vb
        if not all(np.all(np.isfinite(w)) and np.all(np.isfinite(b)) for w, b in params.layers):
            raise TrainingDiverged(epoch)
        log.append({"epoch": epoch, "mean_loss": float(total / n), "clean_acc": accuracy(params, data)})

    return ModelParams(params.layers, params.activations), log


def predict(params: ModelParams, X) -> np.ndarray:
    return nn.argmax(nn.forward(params, X))


def accuracy(params: ModelParams, data: LabeledDataset) -> float:
    if len(data) == 0:
        raise InputError("empty dataset")
    return float(np.mean(predict(params, data.features) == data.labels))


def robust_accuracy(params: ModelParams, data: LabeledDataset, atk: AttackConfig, threads=1) -> float:
    """Accuracy on inputs perturbed by untargeted cross-entropy PGD."""
    if len(data) == 0:
        raise InputError("empty dataset")
    res = attack_rows(
        params, data.features, data.labels, data.row_ids, prediction, atk, threads=threads
    )
    return float(np.mean(predict(params, data.features + res.delta) == data.labels))


def write_log(log, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["epoch", "mean_loss", "clean_acc"])
        for row in log:
            writer.writerow(
                [row["epoch"], format(row["mean_loss"], ".17g"), format(row["clean_acc"], ".17g")]
            )
