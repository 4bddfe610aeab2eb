"""Loss terms of the ICON objective and the self-training variants.

All probability-valued losses clamp their operands to ``[1e-7, 1 - 1e-7]``
before taking logs. Batched inputs are matrices with one row per sample.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import DiffValue
from .models import ModelState


class LabelError(IndexError):
    pass


@dataclass(frozen=True)
class PairLabel:
    i: int
    j: int
    same: bool

    def __post_init__(self):
        if not self.i < self.j:
            raise ValueError(f"pair indices must satisfy i < j, got ({self.i}, {self.j})")


class Pairs:
    """A set of sample pairs stored as parallel index/label arrays.

    Iterating yields :class:`PairLabel` objects; the loss code uses the arrays.
    """

    def __init__(self, i, j, same):
        self.i = np.asarray(i, dtype=np.intp)
        self.j = np.asarray(j, dtype=np.intp)
        self.same = np.asarray(same, dtype=bool)
        if not (self.i.shape == self.j.shape == self.same.shape):
            raise ValueError("pair arrays must have equal length")
        if np.any(self.i >= self.j):
            raise ValueError("pair indices must satisfy i < j")

    @classmethod
    def from_labels(cls, pairs: Sequence[PairLabel]) -> "Pairs":
        if isinstance(pairs, Pairs):
            return pairs
        return cls([p.i for p in pairs], [p.j for p in pairs], [p.same for p in pairs])

    def __len__(self):
        return len(self.i)

    def __iter__(self) -> Iterator[PairLabel]:
        for a, b, s in zip(self.i, self.j, self.same):
            yield PairLabel(int(a), int(b), bool(s))

    def __eq__(self, other):
        if not isinstance(other, Pairs):
            return NotImplemented
        return (np.array_equal(self.i, other.i) and np.array_equal(self.j, other.j)
                and np.array_equal(self.same, other.same))


def _upper_pairs(n: int) -> tuple[np.ndarray, np.ndarray]:
    return np.triu_indices(n, k=1)


def pairs_from_class_labels(labels) -> Pairs:
    labels = np.asarray(labels)
    i, j = _upper_pairs(len(labels))
    return Pairs(i, j, labels[i] == labels[j])


def pairs_from_clusters(g_outputs, conf_threshold: float = 0.9) -> Pairs:
    """Pairs among samples whose top cluster probability reaches ``conf_threshold``.

    Two samples are "same" when their argmax clusters agree.
    """
    g = np.asarray(g_outputs.value if isinstance(g_outputs, DiffValue) else g_outputs, dtype=float)
    keep = np.flatnonzero(g.max(axis=1) >= conf_threshold)
    assign = np.argmax(g, axis=1)
    a, b = _upper_pairs(len(keep))
    i, j = keep[a], keep[b]
    return Pairs(i, j, assign[i] == assign[j])


@dataclass
class PairLoss:
    """Result of a pairwise loss; ``status`` is ``"no-pairs"`` when nothing was scored."""

    loss: DiffValue
    num_pairs: int
    status: str = "ok"

    @property
    def skipped(self) -> bool:
        return self.status != "ok"


def pairwise_bce(preds, pairs) -> PairLoss:
    """Mean binary cross-entropy of dot-product similarities over labelled pairs.

    ``preds`` is a matrix node (rows are probability vectors) or a sequence of
    vector nodes.
    """
    if not isinstance(preds, DiffValue):
        preds = ad.stack(list(preds))
    if preds.shape[0] == 0:
        raise ValueError("pairwise_bce: empty prediction set")
    pairs = Pairs.from_labels(pairs)
    if len(pairs) == 0:
        return PairLoss(DiffValue(0.0), 0, "no-pairs")
    if pairs.j.max() >= preds.shape[0]:
        raise LabelError(f"pair index {pairs.j.max()} out of range for {preds.shape[0]} predictions")
    sim = (ad.take_rows(preds, pairs.i) * ad.take_rows(preds, pairs.j)).sum(axis=1)
    sim = ad.clamp_prob(sim)
    b = pairs.same.astype(float)
    nll = -(ad.log(sim) * b + ad.log(1.0 - sim) * (1.0 - b))
    return PairLoss(nll.mean(), len(pairs))


def cross_entropy(p: DiffValue, y) -> DiffValue:
    """``-log p[y]`` for one vector, or its batch mean for a matrix of rows."""
    p = ad.lift(p)
    y = np.asarray(y, dtype=np.intp)
    n_classes = p.shape[-1]
    if np.any(y < 0) or np.any(y >= n_classes):
        raise LabelError(f"label {y} out of range for {n_classes} classes")
    picked = ad.safe_log(ad.pick(p, y))
    return -picked if picked.ndim == 0 else -(picked.mean())


def rex_penalty(loss_s: DiffValue, loss_t: DiffValue) -> DiffValue:
    """Population variance of the two losses, ``(loss_s - loss_t)^2 / 4``."""
    diff = ad.lift(loss_s) - ad.lift(loss_t)
    return diff * diff * 0.25


def _masked_ce(p: DiffValue, labels: np.ndarray, mask: np.ndarray) -> DiffValue:
    # Mean over every row (masked rows contribute zero), as in FixMatch.
    if p.ndim == 1:
        return cross_entropy(p, int(labels)) * float(mask)
    logp = ad.safe_log(ad.pick(p, labels))
    return -((logp * mask.astype(float)).mean())


def fixmatch_loss(p_weak, p_strong: DiffValue, tau: float = 0.97) -> DiffValue:
    """Cross-entropy of the strong view against confident weak-view pseudo-labels."""
    weak = np.asarray(p_weak.value if isinstance(p_weak, DiffValue) else p_weak, dtype=float)
    labels = np.argmax(weak, axis=-1)
    mask = weak.max(axis=-1) > tau
    return _masked_ce(ad.lift(p_strong), labels, mask)


def pseudolabel_loss(p: DiffValue, tau: float, ramp: float) -> DiffValue:
    """Ramped, thresholded self-labelling on a single view; labels are detached."""
    p = ad.lift(p)
    labels = np.argmax(p.value, axis=-1)
    mask = p.value.max(axis=-1) > tau
    return _masked_ce(p, labels, mask) * float(ramp)


def ramp_weight(step: int, total_steps: int, ramp_frac: float = 0.4) -> float:
    """Linear 0 -> 1 over the first ``ramp_frac`` of training, then flat at 1."""
    if total_steps <= 0:
        return 1.0
    ramp_steps = ramp_frac * total_steps
    if ramp_steps <= 0:
        return 1.0
    return float(min(1.0, step / ramp_steps))


def noisy_student_targets(model: ModelState, target_inputs) -> np.ndarray:
    """Hard ``f`` labels for every target input, with no confidence filter."""
    return model.predict(np.asarray(target_inputs, dtype=float), head="f")


def noisy_student_loss(p: DiffValue, targets) -> DiffValue:
    return cross_entropy(p, targets)


def regression_similarity(y1: DiffValue, y2: DiffValue) -> DiffValue:
    """Similarity of two scalar regressor outputs, ``-(y1 - y2)^2``."""
    d = ad.lift(y1) - ad.lift(y2)
    return -(d * d)


@dataclass
class LossReport:
    ce_s: float = 0.0
    bce_s: float | None = None
    bce_t: float | None = None
    st: float | None = None
    rex: float | None = None
    cluster: float | None = None
    total: float = 0.0
    alpha: float = 0.0
    beta: float = 0.0
    weights: dict = field(default_factory=dict)

    TERMS = ("ce_s", "bce_s", "bce_t", "st", "rex", "cluster")

    def weighted_sum(self) -> float:
        return sum(self.weights.get(t, 0.0) * getattr(self, t)
                   for t in self.TERMS if getattr(self, t) is not None)

    def as_row(self) -> dict[str, float]:
        """Term values with absent terms reported as 0."""
        return {t: (getattr(self, t) or 0.0) for t in self.TERMS}
