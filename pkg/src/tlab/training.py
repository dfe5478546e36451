"""SGD training loop and the three weight-transfer strategies.

The optimizer is classic momentum SGD with decoupled-from-nothing L2:
    v <- momentum * v + g + weight_decay * theta
    theta <- theta - lr * v
run over shuffled minibatches with early stopping on a held-out
validation split.  The best-validation parameter snapshot is restored
at the end, so the returned model's validation accuracy equals the max
of the recorded history.

Strategy drivers:
  run_scratch      train one model from a fresh init
  run_finetune     train A on its domain, continue training it on B's
                   (head reinitialized only if class counts differ)
  run_common_init  train C, then branch two fine-tunes A and B off it
                   (heads always reinitialized in both branches)

Drivers are pure: they never mutate their inputs, and repeated calls
with equal arguments return bit-identical parameters.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import NamedTuple

import numpy as np

from .data import train_val_split
from .model import accuracy, build_dtn, forward, reinit_classifier_head
from .tensor import GradientTape, Tensor, backward, softmax_cross_entropy

__all__ = [
    "LR_GRID",
    "WEIGHT_DECAY_GRID",
    "TrainConfig",
    "EpochRecord",
    "TrainedModel",
    "ConfigurationError",
    "sgd_step",
    "train",
    "run_scratch",
    "run_finetune",
    "run_common_init",
]

# hyperparameter grids a sweep over optimizer settings would draw from
LR_GRID = (0.1, 0.01, 0.001)
WEIGHT_DECAY_GRID = (5e-4, 2.5e-5, 5e-6)


class ConfigurationError(ValueError):
    """A training configuration field is out of its legal range."""


@dataclass(frozen=True)
class TrainConfig:
    """Optimizer and schedule settings for one training run.

    learning_rate may be zero (a no-op training probe leaves parameters
    bit-identical); negative rates are rejected.  batch_size is clamped
    to the training-set size at run time.
    """

    learning_rate: float = 0.01
    weight_decay: float = 5e-4
    momentum: float = 0.9
    batch_size: int = 128
    max_epochs: int = 300
    patience: int = 50
    val_fraction: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ConfigurationError(
                f"learning_rate must be >= 0, got {self.learning_rate}")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigurationError(
                f"momentum must be in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ConfigurationError(
                f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.batch_size < 1:
            raise ConfigurationError(
                f"batch_size must be >= 1, got {self.batch_size}")
        if self.max_epochs < 0:
            raise ConfigurationError(
                f"max_epochs must be >= 0, got {self.max_epochs}")
        if self.patience < 1:
            raise ConfigurationError(
                f"patience must be >= 1, got {self.patience}")
        if not 0.0 < self.val_fraction < 1.0:
            raise ConfigurationError(
                f"val_fraction must be in (0, 1), got {self.val_fraction}")


class EpochRecord(NamedTuple):
    train_loss: float
    val_accuracy: float


@dataclass
class TrainedModel:
    model: object
    history: list
    best_epoch: int
    strategy_tag: str


def sgd_step(theta, grad, velocity, cfg):
    """One momentum-SGD update; returns (new_theta, new_velocity)."""
    v = np.float32(cfg.momentum) * velocity + grad \
        + np.float32(cfg.weight_decay) * theta
    return theta - np.float32(cfg.learning_rate) * v, v


def train(model, dataset, cfg, strategy_tag="scratch", verbose=False):
    """Train a copy of ``model`` on ``dataset`` under ``cfg``.

    Early stopping: training halts once ``cfg.patience`` epochs pass
    without strict validation improvement (first occurrence wins on
    ties), and the best-epoch snapshot is restored.  With max_epochs=0
    the input parameters come back untouched (history empty,
    best_epoch=-1).
    """
    if dataset.num_classes != model.num_classes:
        raise ConfigurationError(
            f"dataset has {dataset.num_classes} classes but model head "
            f"emits {model.num_classes}")
    if len(dataset) == 0:
        raise ConfigurationError("cannot train on an empty dataset")

    params = dict(model.params)
    work = replace(model, params=params)
    history = []
    if cfg.max_epochs == 0:
        return TrainedModel(model=work, history=history, best_epoch=-1,
                            strategy_tag=strategy_tag)

    train_set, val_set = train_val_split(dataset, cfg.val_fraction, cfg.seed)
    rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, 0xC1)))
    n = len(train_set)
    bs = min(cfg.batch_size, n)
    velocity = {name: np.zeros_like(t.data) for name, t in params.items()}
    best_acc = -1.0
    best_epoch = -1
    best_params = {name: t.data for name, t in params.items()}

    for epoch in range(cfg.max_epochs):
        order = rng.permutation(n)
        loss_sum = 0.0
        for start in range(0, n, bs):
            take = order[start : start + bs]
            xb = train_set.images[take]
            yb = train_set.labels[take]
            with GradientTape() as tape:
                for t in params.values():
                    tape.watch(t)
                loss = softmax_cross_entropy(forward(work, xb), yb)
            grads = backward(tape, loss)
            for name in params:
                g = grads[params[name].tid].data
                new_theta, velocity[name] = sgd_step(params[name].data, g,
                                                     velocity[name], cfg)
                params[name] = Tensor(new_theta)
            loss_sum += loss.item() * len(take)
        val_acc = accuracy(work, val_set.images, val_set.labels)
        history.append(EpochRecord(train_loss=loss_sum / n,
                                   val_accuracy=val_acc))
        if verbose:
            print(f"  epoch {epoch:3d} loss {loss_sum / n:.4f} "
                  f"val {val_acc:.4f}")
        if val_acc > best_acc:
            best_acc = val_acc
            best_epoch = epoch
            best_params = {name: t.data for name, t in params.items()}
        elif epoch - best_epoch >= cfg.patience:
            break

    restored = {name: Tensor(arr) for name, arr in best_params.items()}
    return TrainedModel(model=replace(model, params=restored),
                        history=history, best_epoch=best_epoch,
                        strategy_tag=strategy_tag)


def run_scratch(domain, cfg, verbose=False):
    """Fresh seeded model trained on one domain."""
    model = build_dtn(domain.num_classes, seed=cfg.seed)
    return train(model, domain, cfg, strategy_tag="scratch", verbose=verbose)


def run_finetune(domain_a, domain_b, cfg_a, cfg_b, verbose=False):
    """Train A on its domain, then continue it on B's domain.

    Returns (trained_a, trained_b).  The head is reinitialized only
    when the class counts differ; matching counts keep A's head
    bit-identical at B's init.
    """
    trained_a = run_scratch(domain_a, cfg_a, verbose=verbose)
    init_b = trained_a.model
    if domain_b.num_classes != init_b.num_classes:
        init_b = reinit_classifier_head(init_b, domain_b.num_classes,
                                        seed=cfg_b.seed)
    trained_b = train(init_b, domain_b, cfg_b, strategy_tag="ft",
                      verbose=verbose)
    return trained_a, trained_b


def run_common_init(domain_c, domain_a, domain_b, cfg_c, cfg_a, cfg_b,
                    verbose=False):
    """Train C, then branch fine-tunes for A and B off its weights.

    Both branch heads are reinitialized unconditionally, even when the
    class counts happen to match, so neither branch inherits C's
    classifier layer.  Returns (trained_a, trained_b).
    """
    trained_c = run_scratch(domain_c, cfg_c, verbose=verbose)
    init_a = reinit_classifier_head(trained_c.model, domain_a.num_classes,
                                    seed=cfg_a.seed)
    init_b = reinit_classifier_head(trained_c.model, domain_b.num_classes,
                                    seed=cfg_b.seed)
    trained_a = train(init_a, domain_a, cfg_a, strategy_tag="common_init",
                      verbose=verbose)
    trained_b = train(init_b, domain_b, cfg_b, strategy_tag="common_init",
                      verbose=verbose)
    return trained_a, trained_b
