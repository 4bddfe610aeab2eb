"""Accuracy metrics, confusion matrices and the cluster-head probe.

These are the only functions that take target-domain labels.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .models import ModelState


class EvaluationError(ValueError):
    pass


def _labels(y) -> np.ndarray:
    y = np.asarray(y, dtype=np.int64)
    if y.size == 0:
        raise EvaluationError("no samples to evaluate")
    return y


def accuracy(model: ModelState, X, y) -> float:
    y = _labels(y)
    return float(np.mean(model.predict(X, "f") == y))


def mean_class_accuracy(model: ModelState, X, y, num_classes: int | None = None) -> float:
    """Unweighted mean of per-class recall."""
    y = _labels(y)
    pred = model.predict(X, "f")
    num_classes = model.num_classes if num_classes is None else num_classes
    recalls = []
    for c in range(num_classes):
        members = y == c
        if not members.any():
            raise EvaluationError(f"class {c} has no samples")
        recalls.append(np.mean(pred[members] == c))
    return float(np.mean(recalls))


@dataclass
class ConfusionMatrix:
    counts: np.ndarray  # rows: ground truth, columns: prediction

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def accuracy(self) -> float:
        return float(np.trace(self.counts) / self.counts.sum())

    def to_csv(self, path=None) -> str:
        n = self.counts.shape[0]
        lines = ["true\\pred," + ",".join(str(c) for c in range(n))]
        lines += [f"{r}," + ",".join(str(int(v)) for v in self.counts[r]) for r in range(n)]
        text = "\n".join(lines) + "\n"
        if path is not None:
            Path(path).write_bytes(text.encode("utf-8"))
        return text


def confusion_from_predictions(y, pred, num_classes: int) -> ConfusionMatrix:
    counts = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(counts, (np.asarray(y), np.asarray(pred)), 1)
    return ConfusionMatrix(counts)


def confusion(model: ModelState, X, y) -> ConfusionMatrix:
    y = _labels(y)
    return confusion_from_predictions(y, model.predict(X, "f"), model.num_classes)


@dataclass
class ProbeResult:
    percentage: float
    f_failures: int
    g_successes: int
    num_pairs: int
    status: str = "ok"

    def __float__(self):
        return self.percentage


EXHAUSTIVE_LIMIT = 200


def sample_pairs(n: int, n_pairs: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Unordered index pairs; every pair when ``n`` is small or ``n_pairs``
    covers them all, otherwise ``n_pairs`` distinct pairs drawn without replacement."""
    total = n * (n - 1) // 2
    if n <= EXHAUSTIVE_LIMIT or n_pairs >= total:
        return np.triu_indices(n, k=1)
    flat = rng.choice(total, size=n_pairs, replace=False)
    flat.sort()
    # Invert the row-major upper-triangle index: row i starts at i*n - i*(i+1)/2.
    i = (n - 2 - np.floor(np.sqrt(-8.0 * flat + 4.0 * n * (n - 1) - 7) / 2.0 - 0.5)).astype(np.int64)
    j = flat + i + 1 - total + (n - i) * (n - i - 1) // 2
    return i, j


def probe_from_predictions(y, f_pred, g_pred, i, j) -> ProbeResult:
    y, f_pred, g_pred = np.asarray(y), np.asarray(f_pred), np.asarray(g_pred)
    truth = y[i] == y[j]
    f_ok = (f_pred[i] == f_pred[j]) == truth
    g_ok = (g_pred[i] == g_pred[j]) == truth
    f_fail = ~f_ok
    n_fail = int(f_fail.sum())
    if n_fail == 0:
        return ProbeResult(0.0, 0, 0, len(i), "no-failures")
    n_g = int((f_fail & g_ok).sum())
    return ProbeResult(100.0 * n_g / n_fail, n_fail, n_g, len(i))


def probe_g_vs_f(model: ModelState, X, y, n_pairs: int = 10_000, seed: int = 0) -> ProbeResult:
    """Share of target pairs ``f`` gets wrong on which ``g`` is right, in percent.

    A head is right on a pair when "same argmax" matches "same label".
    ``g`` is compared in its own cluster index space.
    """
    y = np.asarray(y, dtype=np.int64)
    if len(y) < 2:
        raise EvaluationError("probe needs at least 2 samples")
    if n_pairs < 1:
        raise EvaluationError("n_pairs must be >= 1")
    i, j = sample_pairs(len(y), n_pairs, np.random.default_rng(seed))
    return probe_from_predictions(y, model.predict(X, "f"), model.predict(X, "g"), i, j)
