"""Online rank-statistics clustering of the target domain, and a k-means fallback."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import DiffValue
from .losses import PairLoss, Pairs, pairwise_bce
from .models import ConfigError, ModelState, backbone_graph, head_graph


@dataclass(frozen=True)
class RankStatConfig:
    k: int = 5


def effective_k(k: int, feature_dim: int) -> int:
    return max(1, min(k, feature_dim))


def top_k_sets(features: np.ndarray, k: int) -> np.ndarray:
    """Boolean membership mask of the k largest entries per row.

    Ties go to the lower index: a stable sort of the negated values keeps
    equal entries in index order.
    """
    features = np.atleast_2d(np.asarray(features, dtype=float))
    if k > features.shape[1]:
        raise ConfigError(f"k={k} exceeds feature length {features.shape[1]}")
    order = np.argsort(-features, axis=1, kind="stable")[:, :k]
    mask = np.zeros(features.shape, dtype=bool)
    np.put_along_axis(mask, order, True, axis=1)
    return mask


def rank_stat_pair_label(x1, x2, k: int = 5) -> bool:
    """True iff the index sets of the k largest components coincide."""
    x1, x2 = np.asarray(x1, dtype=float), np.asarray(x2, dtype=float)
    if x1.shape != x2.shape:
        raise ValueError(f"feature lengths differ: {x1.shape} vs {x2.shape}")
    masks = top_k_sets(np.stack([x1, x2]), k)
    return bool(np.array_equal(masks[0], masks[1]))


def rank_stat_pairs(features: np.ndarray, k: int) -> Pairs:
    """All unordered pairs (i < j) of a batch labelled by rank statistics."""
    masks = top_k_sets(features, k)
    # Equal k-sets <=> overlap count equals k.
    overlap = masks.astype(np.int64) @ masks.T.astype(np.int64)
    i, j = np.triu_indices(len(masks), k=1)
    return Pairs(i, j, overlap[i, j] == k)


def cluster_head_loss(model: ModelState, target_batch, cfg: RankStatConfig = RankStatConfig(),
                      leaves: Mapping[str, DiffValue] | None = None,
                      detach_backbone: bool = False, feats: DiffValue | None = None) -> PairLoss:
    """Pairwise BCE on ``g`` outputs against rank-statistic labels of the batch.

    Labels come from the current backbone features as plain values. ``feats``
    lets a caller reuse an already-built feature node for the same batch.
    """
    X = np.asarray(target_batch, dtype=float)
    if X.ndim != 2 or X.shape[0] < 2:
        return PairLoss(DiffValue(0.0), 0, "no-pairs")
    if leaves is None:
        leaves = model.leaves()
    if feats is None:
        feats = backbone_graph(model, leaves, X)
    k = effective_k(cfg.k, model.feature_dim)
    pairs = rank_stat_pairs(feats.value, k)
    g_in = feats.detach() if detach_backbone else feats
    return pairwise_bce(head_graph(leaves, g_in, "g"), pairs)


def kmeans_objective(features: np.ndarray, assign: np.ndarray, centers: np.ndarray) -> float:
    return float(((features - centers[assign]) ** 2).sum())


def _farthest_point_init(X: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    centers = [X[rng.integers(len(X))]]
    d2 = ((X - centers[0]) ** 2).sum(axis=1)
    for _ in range(1, k):
        idx = int(np.argmax(d2))
        centers.append(X[idx])
        d2 = np.minimum(d2, ((X - X[idx]) ** 2).sum(axis=1))
    return np.array(centers)


def kmeans_assign(features, num_clusters: int, iters: int = 50, seed: int = 0,
                  history: list | None = None) -> np.ndarray:
    """Lloyd's algorithm from a seeded farthest-point start.

    Empty clusters are moved to the point farthest from its current centre.
    When ``history`` is given, the objective after each iteration is appended.
    """
    X = np.asarray(features, dtype=float)
    if num_clusters < 1 or len(X) < num_clusters:
        raise ConfigError(f"cannot form {num_clusters} clusters from {len(X)} samples")
    if iters < 1:
        raise ConfigError("iters must be >= 1")
    rng = np.random.default_rng(seed)
    centers = _farthest_point_init(X, num_clusters, rng)
    assign = np.zeros(len(X), dtype=np.intp)
    for _ in range(iters):
        d2 = ((X[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        new_assign = np.argmin(d2, axis=1)
        new_centers = centers.copy()
        for c in range(num_clusters):
            members = new_assign == c
            if members.any():
                new_centers[c] = X[members].mean(axis=0)
            else:
                far = int(np.argmax(d2[np.arange(len(X)), new_assign]))
                new_centers[c] = X[far]
                new_assign[far] = c
        converged = np.array_equal(new_assign, assign) and np.array_equal(new_centers, centers)
        assign, centers = new_assign, new_centers
        if history is not None:
            history.append(kmeans_objective(X, assign, centers))
        if converged:
            break
    return assign
