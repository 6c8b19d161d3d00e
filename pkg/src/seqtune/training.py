"""Weighted loss, momentum SGD and an epoch loop that keeps the best validation checkpoint."""
from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, ContractError
from .scheduler import SftSchedule, apply_freeze_state, trainable_groups_at_epoch
from .tensor import Tensor

logger = logging.getLogger(__name__)


class ClassWeightPolicy(str, enum.Enum):
    UNIFORM = "UNIFORM"
    INVERSE_FREQUENCY = "INVERSE_FREQUENCY"


@dataclass(frozen=True)
class TrainConfig:
    schedule: SftSchedule
    learning_rate: float = 0.01
    momentum: float = 0.9
    batch_size: int = 16
    seed: int = 0
    class_weight_policy: ClassWeightPolicy = ClassWeightPolicy.INVERSE_FREQUENCY

    def __post_init__(self):
        object.__setattr__(self, "class_weight_policy", ClassWeightPolicy(self.class_weight_policy))
        if not self.learning_rate > 0:
            raise ConfigurationError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ConfigurationError(f"batch_size must be >= 1, got {self.batch_size}")
        if not 0 <= self.momentum < 1:
            raise ConfigurationError(f"momentum must lie in [0, 1), got {self.momentum}")

    def to_dict(self) -> dict:
        return {
            "schedule": self.schedule.to_dict(),
            "learning_rate": self.learning_rate,
            "momentum": self.momentum,
            "batch_size": self.batch_size,
            "seed": self.seed,
            "class_weight_policy": self.class_weight_policy.value,
        }


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    trainable_groups: int
    train_loss: float
    validation_accuracy: float


@dataclass
class Checkpoint:
    epoch: int
    parameter_snapshot: dict[str, np.ndarray]
    validation_accuracy: float
    history: list[EpochRecord] = field(default_factory=list)


# ----------------------------------------------------------------------- loss


def class_weights(label_counts: Sequence[int], policy=ClassWeightPolicy.INVERSE_FREQUENCY) -> np.ndarray:
    """Per-class loss weights; inverse frequency weights average to 1."""
    counts = np.asarray(label_counts, dtype=np.float64)
    policy = ClassWeightPolicy(policy)
    if policy is ClassWeightPolicy.UNIFORM:
        return np.ones(len(counts))
    empty = [i for i, c in enumerate(counts) if c < 1]
    if empty:
        raise ConfigurationError(f"class {empty[0]} has no samples; inverse-frequency weight undefined")
    return counts.sum() / (len(counts) * counts)


def weighted_cross_entropy(logits: Tensor, labels: Sequence[int], weights) -> Tensor:
    """mean_i w[y_i] * -log softmax(logits_i)[y_i], evaluated in log space."""
    n, k = logits.shape
    labels = np.asarray(labels, dtype=int)
    if labels.shape != (n,):
        raise ContractError(f"expected {n} labels, got {labels.shape}")
    if labels.min() < 0 or labels.max() >= k:
        raise ContractError(f"labels must lie in [0, {k}), got range [{labels.min()}, {labels.max()}]")
    weights = np.asarray(weights, dtype=np.float64)
    coef = np.zeros((n, k))
    coef[np.arange(n), labels] = -weights[labels] / n
    return T.mul(T.log_softmax_rows(logits), Tensor(coef)).sum()


# ------------------------------------------------------------------ optimizer


class SGD:
    """Momentum SGD: v <- momentum * v + grad; p <- p - lr * v.

    Only parameters with ``requires_grad`` are touched; velocity of a frozen
    parameter is kept until it is unfrozen again.
    """

    def __init__(self, learning_rate: float, momentum: float = 0.9):
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.velocity: dict[int, np.ndarray] = {}

    def step(self, parameters: Sequence[Tensor]) -> None:
        active = [p for p in parameters if p.requires_grad]
        missing = [p for p in active if p.grad is None]
        if missing:
            raise ContractError(f"{len(missing)} trainable parameters have no gradient; call backward() first")
        for p in active:
            v = self.velocity.get(id(p))
            v = p.grad.copy() if v is None else self.momentum * v + p.grad
            self.velocity[id(p)] = v
            p.data -= self.learning_rate * v
            p.grad = None


def sgd_step(network, learning_rate: float, momentum: float, velocity_state: SGD | None = None) -> SGD:
    opt = velocity_state if velocity_state is not None else SGD(learning_rate, momentum)
    opt.learning_rate, opt.momentum = learning_rate, momentum
    opt.step(network.parameters())
    return opt


# ---------------------------------------------------------------------- loop


def predict(network, images: np.ndarray, batch_size: int = 128) -> tuple[np.ndarray, np.ndarray]:
    """Softmax probabilities and argmax labels (ties go to the lowest index)."""
    images = np.asarray(images, dtype=np.float64)
    probs = []
    with T.no_grad():
        for lo in range(0, len(images), batch_size):
            logits = network.forward(Tensor(images[lo : lo + batch_size]), training=False)
            probs.append(T.stable_softmax(logits.data))
    probs = np.concatenate(probs) if probs else np.zeros((0, network.config.num_classes))
    return probs, np.argmax(probs, axis=1)


def restore(network, checkpoint: Checkpoint) -> None:
    network.load_state_dict(checkpoint.parameter_snapshot)


def fit(network, train_set, val_set, config: TrainConfig, on_epoch_end=None) -> Checkpoint:
    """Train for ``schedule.epochs`` epochs and return the best validation checkpoint.

    ``train_set`` and ``val_set`` need ``images`` (N, C, H, W) and ``labels``.
    Ties in validation accuracy keep the earliest epoch. The network is left in
    its final-epoch state; use :func:`restore` to load the checkpoint.
    ``on_epoch_end(network, record)`` is called after each epoch's validation.
    """
    if len(train_set.labels) == 0 or len(val_set.labels) == 0:
        raise ConfigurationError("training and validation sets must both be non-empty")
    schedule = config.schedule
    if schedule.num_groups != network.num_groups:
        raise ConfigurationError(f"schedule has {schedule.num_groups} groups but the network has {network.num_groups} groups")
    k = network.config.num_classes
    train_labels = np.asarray(train_set.labels, dtype=int)
    if train_labels.max() >= k:
        raise ConfigurationError(f"labels exceed the head's {k} classes")
    weights = class_weights(np.bincount(train_labels, minlength=k), config.class_weight_policy)
    train_images = np.asarray(train_set.images, dtype=np.float64)
    val_labels = np.asarray(val_set.labels, dtype=int)

    rng = np.random.default_rng(config.seed)
    opt = SGD(config.learning_rate, config.momentum)
    params = network.parameters()
    best: Checkpoint | None = None
    history: list[EpochRecord] = []
    for epoch in range(schedule.epochs):
        trainable = trainable_groups_at_epoch(schedule, epoch)
        apply_freeze_state(network, trainable)
        order = rng.permutation(len(train_labels))
        total = 0.0
        for lo in range(0, len(order), config.batch_size):
            idx = order[lo : lo + config.batch_size]
            logits = network.forward(Tensor(train_images[idx]), training=True)
            loss = weighted_cross_entropy(logits, train_labels[idx], weights)
            loss.backward()
            opt.step(params)
            total += loss.item() * len(idx)
        _, predicted = predict(network, val_set.images)
        acc = float(np.mean(predicted == val_labels))
        record = EpochRecord(epoch, len(trainable), total / len(order), acc)
        history.append(record)
        if on_epoch_end is not None:
            on_epoch_end(network, record)
        logger.debug("epoch %d groups=%d loss=%.5f val_acc=%.4f", *(record.__dict__.values()))
        if best is None or acc > best.validation_accuracy:
            best = Checkpoint(epoch, network.state_dict(), acc)
    best.history = history
    return best
