"""Adam optimizer, training loop, and evaluation."""

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .bof import BofPooling
from .data import Dataset, iter_batches
from .decorrelation import (RegularizerConfig, dictionary_penalty,
                            dictionary_penalty_gradient,
                            mean_offdiag_squared_correlation)
from .errors import ConfigError, DataError, StateError
from .layers import LayerStack, softmax_cross_entropy
from .tensor import Rng

log = logging.getLogger(__name__)


class Adam:
    """Standard Adam with bias correction; updates parameters in place."""

    def __init__(self, params: list, lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        if lr <= 0:
            raise ConfigError(f"learning rate must be > 0, got {lr}")
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]

    def step(self, grads: list):
        if len(grads) != len(self.params):
            raise StateError(f"{len(grads)} gradients for {len(self.params)} parameters")
        self.t += 1
        for i, (p, g) in enumerate(zip(self.params, grads)):
            if g.shape != p.shape:
                raise StateError(f"gradient shape {g.shape} != parameter shape {p.shape}")
            self.m[i] = self.beta1 * self.m[i] + (1 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1 - self.beta2) * g * g
            m_hat = self.m[i] / (1 - self.beta1 ** self.t)
            v_hat = self.v[i] / (1 - self.beta2 ** self.t)
            p -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


@dataclass
class EpochMetrics:
    epoch: int
    train_loss: float
    val_error: float
    # end-of-epoch codebook diagnostics; None for gmp/gap models
    penalty: Optional[float] = None
    codebook_correlation: Optional[float] = None
    # filled per the run's test-eval policy
    test_error: Optional[float] = None

    def to_dict(self) -> dict:
        return {
            "epoch": self.epoch,
            "train_loss": self.train_loss,
            "val_error": self.val_error,
            "penalty": self.penalty,
            "codebook_correlation": self.codebook_correlation,
            "test_error": self.test_error,
        }


@dataclass
class TrainResult:
    metrics: list
    selected_epoch: int
    parameters: list = field(repr=False)  # best-validation snapshot

    @property
    def val_error(self) -> float:
        return self.metrics[self.selected_epoch].val_error

    @property
    def test_error(self) -> Optional[float]:
        return self.metrics[self.selected_epoch].test_error


def find_bof_layer(model: LayerStack) -> Optional[BofPooling]:
    for layer in model.layers:
        if isinstance(layer, BofPooling):
            return layer
    return None


def evaluate(model: LayerStack, dataset: Dataset, batch_size: int = 128) -> float:
    """Error rate in percent; argmax prediction, inference mode."""
    if len(dataset) == 0:
        raise DataError("cannot evaluate on an empty split")
    model.eval()
    wrong = 0
    for start in range(0, len(dataset), batch_size):
        xb = dataset.images[start : start + batch_size]
        yb = dataset.labels[start : start + batch_size]
        pred = model.forward(xb).argmax(axis=1)
        wrong += int((pred != yb).sum())
    return 100.0 * wrong / len(dataset)


def train(model: LayerStack, train_set: Dataset, val_set: Dataset,
          rng: Rng, *, epochs: int, lr: float = 1e-3, batch_size: int = 128,
          regularizer: Optional[RegularizerConfig] = None,
          regularizer_enabled: bool = True,
          test_set: Optional[Dataset] = None, test_eval: str = "each-epoch",
          augment=None) -> TrainResult:
    """Mini-batch Adam training with per-epoch validation.

    Each step: forward, cross-entropy, backward, then (when enabled and
    beta > 0) the decorrelation gradient added to the codebook centers,
    one Adam update, and scale re-clamping. The returned parameters are
    the snapshot of the epoch with the lowest validation error (ties go
    to the earliest epoch) and are also restored into ``model``.

    ``test_eval``: "each-epoch" scores the test split every epoch,
    "selected" only at the selected epoch, "none" never.
    """
    if epochs < 1:
        raise ConfigError(f"epochs must be >= 1, got {epochs}")
    if test_eval not in ("each-epoch", "selected", "none"):
        raise ConfigError(f"unknown test_eval policy {test_eval!r}")
    if test_eval != "none" and test_set is None:
        raise ConfigError(f"test_eval={test_eval!r} needs a test split")

    reg = regularizer or RegularizerConfig()
    bof_layer = find_bof_layer(model)
    apply_penalty = (regularizer_enabled and reg.beta != 0.0
                     and bof_layer is not None)
    shuffle_rng = rng.split("shuffle")
    augment_rng = rng.split("augment")
    optimizer = Adam(model.parameters(), lr=lr)

    metrics: list[EpochMetrics] = []
    best = None  # (val_error, epoch, params)
    for epoch in range(epochs):
        model.train()
        loss_sum = 0.0
        n_batches = 0
        for xb, yb in iter_batches(train_set, batch_size, shuffle_rng):
            if augment is not None:
                xb = augment(xb, augment_rng)
            model.zero_grads()
            logits = model.forward(xb)
            loss, grad_logits = softmax_cross_entropy(logits, yb)
            model.backward(grad_logits)
            if apply_penalty:
                bof_layer.grads["centers"] += reg.beta * dictionary_penalty_gradient(
                    bof_layer.codebook.centers, reg.epsilon)
            optimizer.step(model.gradients())
            model.constrain()
            loss_sum += loss
            n_batches += 1

        entry = EpochMetrics(
            epoch=epoch,
            train_loss=loss_sum / n_batches,
            val_error=evaluate(model, val_set, batch_size),
        )
        if bof_layer is not None:
            centers = bof_layer.codebook.centers
            entry.penalty = dictionary_penalty(centers, reg.epsilon)
            entry.codebook_correlation = mean_offdiag_squared_correlation(
                centers, reg.epsilon)
        if test_eval == "each-epoch":
            entry.test_error = evaluate(model, test_set, batch_size)
        metrics.append(entry)
        log.info("epoch %d: loss %.4f val %.2f%%%s", epoch, entry.train_loss,
                 entry.val_error,
                 "" if entry.test_error is None else f" test {entry.test_error:.2f}%")

        if best is None or entry.val_error < best[0]:
            best = (entry.val_error, epoch, model.state())

    _, selected, params = best
    model.load_state(params)
    if test_eval == "selected" and metrics[selected].test_error is None:
        metrics[selected].test_error = evaluate(model, test_set, batch_size)
    return TrainResult(metrics=metrics, selected_epoch=selected, parameters=params)
