"""Gradient-sign attacks in white-box and query-free black-box modes.

The perturbation is the single-step sign update
    x_hat = x + epsilon * sign(grad_x loss(y, f(x)))
with the true label y (untargeted), parameters frozen, and an optional
clip back to the valid pixel range [-1, 1].  sign(0) is 0, so dead
coordinates are never perturbed, and epsilon = 0 returns the input
bit-identically.

Both evaluation modes first restrict to the subset of test examples the
*target* model classifies correctly, so accuracy on the subset is 1.0
before the attack by construction.  White-box crafts on the target
itself; black-box crafts on an independently trained source model and
never touches the target's gradients, only that one clean forward pass
for subset selection.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .model import forward, model_id, predict
from .tensor import GradientTape, Tensor, backward, softmax_cross_entropy

__all__ = [
    "PIXEL_MIN",
    "PIXEL_MAX",
    "AttackSpec",
    "AdversarialBatch",
    "EmptySubsetError",
    "LabelSpaceError",
    "input_gradient",
    "fgsm_step",
    "fgsm",
    "attack_white_box",
    "attack_black_box",
]

PIXEL_MIN = -1.0
PIXEL_MAX = 1.0


class EmptySubsetError(RuntimeError):
    """The target classifies no test example correctly; the attacked
    subset would be empty and accuracies undefined."""


class LabelSpaceError(ValueError):
    """Source and target models emit different label spaces, so labels
    crafted on one are meaningless to the other."""


@dataclass(frozen=True)
class AttackSpec:
    """Attack settings: budget, mode, and range clipping."""

    epsilon: float
    mode: str = "white_box"
    clip_to_valid_range: bool = True

    def __post_init__(self):
        if self.epsilon < 0:
            raise ValueError(f"epsilon must be >= 0, got {self.epsilon}")
        if self.mode not in ("white_box", "black_box"):
            raise ValueError(f"unknown attack mode {self.mode!r}")


@dataclass
class AdversarialBatch:
    """Original and perturbed examples over the attacked subset.

    ``subset_indices`` are positions into the evaluated test set, so a
    caller can line perturbed examples back up with the full set.
    """

    originals: np.ndarray
    perturbed: np.ndarray
    true_labels: np.ndarray
    epsilon: float
    crafting_model_id: str
    subset_indices: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.subset_indices is None:
            self.subset_indices = np.arange(len(self.originals))
        if not (len(self.originals) == len(self.perturbed)
                == len(self.true_labels) == len(self.subset_indices)):
            raise ValueError("adversarial batch fields disagree on length")

    def __len__(self):
        return len(self.originals)


def input_gradient(model, images, labels, batch_size=256):
    """Gradient of the mean cross-entropy w.r.t. the input pixels.

    Parameters are frozen: they are never watched, so no parameter
    gradient exists on the tape.  Per-sample gradients are recovered
    exactly from chunked mean-loss gradients by scaling with the chunk
    size (samples do not interact in the loss).
    """
    images = np.asarray(images, dtype=np.float32)
    labels = np.asarray(labels)
    out = np.empty_like(images)
    for start in range(0, len(images), batch_size):
        xb = images[start : start + batch_size]
        yb = labels[start : start + batch_size]
        with GradientTape() as tape:
            xt = Tensor(xb)
            tape.watch(xt)
            loss = softmax_cross_entropy(forward(model, xt), yb)
        g = backward(tape, loss)[xt.tid].data
        out[start : start + len(xb)] = g * np.float32(len(xb))
    return out


def fgsm_step(images, grad, epsilon, clip_to_valid_range=True):
    """Pure sign update: x + epsilon * sign(grad), optionally clipped."""
    if epsilon < 0:
        raise ValueError(f"epsilon must be >= 0, got {epsilon}")
    images = np.asarray(images, dtype=np.float32)
    if epsilon == 0:
        return images.copy()
    adv = images + np.float32(epsilon) * np.sign(grad, dtype=np.float32)
    if clip_to_valid_range:
        np.clip(adv, np.float32(PIXEL_MIN), np.float32(PIXEL_MAX), out=adv)
    return adv


def fgsm(model, images, labels, epsilon, clip_to_valid_range=True):
    """Craft sign-update examples against ``model`` with true labels."""
    images = np.asarray(images, dtype=np.float32)
    labels = np.asarray(labels)
    if epsilon < 0:
        raise ValueError(f"epsilon must be >= 0, got {epsilon}")
    if epsilon == 0:
        perturbed = images.copy()
    else:
        grad = input_gradient(model, images, labels)
        perturbed = fgsm_step(images, grad, epsilon, clip_to_valid_range)
    return AdversarialBatch(originals=images.copy(), perturbed=perturbed,
                            true_labels=labels.copy(), epsilon=epsilon,
                            crafting_model_id=model_id(model))


def _correct_subset(target, testset):
    preds = predict(target, testset.images)
    correct = np.flatnonzero(preds == testset.labels)
    if len(correct) == 0:
        raise EmptySubsetError(
            "target model classifies no test example correctly")
    return correct


def attack_white_box(target, testset, spec):
    """Attack the target on its own correctly-classified test subset."""
    if spec.mode != "white_box":
        raise ValueError(f"spec mode is {spec.mode!r}, expected 'white_box'")
    subset = _correct_subset(target, testset)
    batch = fgsm(target, testset.images[subset], testset.labels[subset],
                 spec.epsilon, spec.clip_to_valid_range)
    batch.subset_indices = subset
    return batch


def attack_black_box(source, target, testset, spec):
    """Craft on ``source``, evaluate later on ``target``.

    Zero queries to the target beyond the one clean forward pass that
    selects its correctly-classified subset; gradients come from the
    source only.
    """
    if spec.mode != "black_box":
        raise ValueError(f"spec mode is {spec.mode!r}, expected 'black_box'")
    if source.num_classes != target.num_classes:
        raise LabelSpaceError(
            f"source emits {source.num_classes} classes but target emits "
            f"{target.num_classes}; transferred labels would be meaningless")
    subset = _correct_subset(target, testset)
    batch = fgsm(source, testset.images[subset], testset.labels[subset],
                 spec.epsilon, spec.clip_to_valid_range)
    batch.subset_indices = subset
    return batch
