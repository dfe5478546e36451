"""Attack outcome metrics: adversarial accuracy, transferability, and
input-gradient-norm diagnostics.

Transferability follows
    gamma = (a_b - a_w) / a_w
where a_w is the target's accuracy under a white-box attack and a_b its
accuracy under a black-box attack crafted on a source model, both over
the same target-correct subset.  gamma = 0 means black-box matched
white-box; gamma < 0 means the transferred attack was *stronger*, which
is legal and does occur.  a_w = 0 leaves gamma undefined and raises
instead of fabricating an infinity.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .attack import (
    EmptySubsetError,
    LabelSpaceError,
    fgsm_step,
    input_gradient,
)
from .model import model_id, predict

__all__ = [
    "GammaUndefinedError",
    "EmptyBatchError",
    "AttackReport",
    "GradNormHistogram",
    "adversarial_accuracy",
    "transferability_gamma",
    "gradient_norm_histogram",
    "compile_report",
]


class GammaUndefinedError(ZeroDivisionError):
    """White-box accuracy is zero, so gamma has no value."""


class EmptyBatchError(ValueError):
    """A metric was asked to average over zero examples."""


@dataclass
class AttackReport:
    """One (target, epsilon) evaluation row.

    a_b and gamma are None for white-box-only runs; gamma is present
    exactly when both a_b exists and a_w > 0.
    """

    epsilon: float
    clean_accuracy: float
    subset_size: int
    a_w: float
    a_b: float = None
    gamma: float = None
    strategy_tag: str = ""
    target_model_id: str = ""
    source_model_id: str = None


@dataclass
class GradNormHistogram:
    """Distribution of per-example input-gradient L2 norms.

    ``counts_success`` / ``counts_fail`` split the attacked subset by
    whether the attack flipped the prediction; they are all zero when
    the histogram was built without an adversarial batch.
    """

    bin_edges: np.ndarray
    counts_all: np.ndarray
    cumulative_fraction: np.ndarray
    counts_success: np.ndarray
    counts_fail: np.ndarray
    norms: np.ndarray = field(repr=False, default=None)

    @property
    def median_norm(self):
        return float(np.median(self.norms))


def adversarial_accuracy(target, batch):
    """Fraction of the attacked subset still classified correctly."""
    if len(batch) == 0:
        raise EmptyBatchError("adversarial accuracy over an empty batch")
    preds = predict(target, batch.perturbed)
    return float(np.mean(preds == batch.true_labels))


def transferability_gamma(a_w, a_b):
    """(a_b - a_w) / a_w; negative when the black-box attack is stronger."""
    for name, v in (("a_w", a_w), ("a_b", a_b)):
        if not 0.0 <= v <= 1.0:
            raise ValueError(f"{name} must be an accuracy in [0, 1], got {v}")
    if a_w == 0:
        raise GammaUndefinedError(
            "white-box accuracy is zero; gamma is undefined")
    return (a_b - a_w) / a_w


def gradient_norm_histogram(model, testset, bins=50, adv_batch=None):
    """Histogram of per-example L2 input-gradient norms on a test set.

    Bins are uniform on [0, max norm]; examples at the max edge land in
    the last bin.  cumulative_fraction ends at exactly 1.0.  Passing the
    adversarial batch that attacked ``model`` on ``testset`` adds the
    success/fail split over the attacked subset.
    """
    if bins < 2:
        raise ValueError(f"need at least 2 bins, got {bins}")
    if len(testset) == 0:
        raise EmptyBatchError("gradient norms over an empty test set")
    grads = input_gradient(model, testset.images, testset.labels)
    norms = np.sqrt((grads.astype(np.float64) ** 2)
                    .sum(axis=(1, 2, 3)))
    hi = float(norms.max())
    if hi <= 0:
        hi = 1.0
    edges = np.linspace(0.0, hi, bins + 1)
    counts_all, _ = np.histogram(norms, bins=edges)
    cumulative = np.cumsum(counts_all) / len(norms)
    counts_success = np.zeros(bins, dtype=np.int64)
    counts_fail = np.zeros(bins, dtype=np.int64)
    if adv_batch is not None and len(adv_batch):
        preds = predict(model, adv_batch.perturbed)
        flipped = preds != adv_batch.true_labels
        sub_norms = norms[adv_batch.subset_indices]
        counts_success, _ = np.histogram(sub_norms[flipped], bins=edges)
        counts_fail, _ = np.histogram(sub_norms[~flipped], bins=edges)
    return GradNormHistogram(bin_edges=edges, counts_all=counts_all,
                             cumulative_fraction=cumulative,
                             counts_success=counts_success,
                             counts_fail=counts_fail, norms=norms)


def compile_report(target, testset, eps_grid, source=None, strategy_tag="",
                   clip_to_valid_range=True):
    """Evaluate a target over an epsilon grid; one AttackReport per
    epsilon, sorted ascending.

    With a source model every row gets the black-box accuracy and, when
    defined, gamma.  The attacked subset (target-correct examples) is
    identical for both modes at every epsilon.
    """
    eps_grid = sorted(float(e) for e in eps_grid)
    if not eps_grid:
        raise ValueError("eps_grid must not be empty")
    if eps_grid[0] < 0:
        raise ValueError(f"epsilon must be >= 0, got {eps_grid[0]}")
    if source is not None and source.num_classes != target.num_classes:
        raise LabelSpaceError(
            f"source emits {source.num_classes} classes but target emits "
            f"{target.num_classes}; transferred labels would be meaningless")
    preds = predict(target, testset.images)
    clean = float(np.mean(preds == testset.labels))
    subset = np.flatnonzero(preds == testset.labels)
    if len(subset) == 0:
        raise EmptySubsetError(
            "target model classifies no test example correctly")
    imgs = testset.images[subset]
    labels = testset.labels[subset]
    # the sign-update gradient does not depend on epsilon, so one
    # gradient pass per crafting model serves the whole grid; rows are
    # bit-identical to calling the attack ops per epsilon
    grad_t = input_gradient(target, imgs, labels)
    grad_s = input_gradient(source, imgs, labels) if source is not None else None
    tgt_id = model_id(target)
    src_id = model_id(source) if source is not None else None
    rows = []
    for eps in eps_grid:
        adv_w = fgsm_step(imgs, grad_t, eps, clip_to_valid_range)
        a_w = float(np.mean(predict(target, adv_w) == labels))
        a_b = gamma = None
        if source is not None:
            adv_b = fgsm_step(imgs, grad_s, eps, clip_to_valid_range)
            a_b = float(np.mean(predict(target, adv_b) == labels))
            if a_w > 0:
                gamma = transferability_gamma(a_w, a_b)
        rows.append(AttackReport(epsilon=eps, clean_accuracy=clean,
                                 subset_size=len(subset), a_w=a_w, a_b=a_b,
                                 gamma=gamma, strategy_tag=strategy_tag,
                                 target_model_id=tgt_id,
                                 source_model_id=src_id))
    return rows
