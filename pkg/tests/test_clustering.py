import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from icon_uda.clustering import (RankStatConfig, cluster_head_loss, effective_k, kmeans_assign,
                                 rank_stat_pair_label, rank_stat_pairs, top_k_sets)
from icon_uda.models import ConfigError, HyperbolicLayerSpec, init_model
from icon_uda.trainer import SGDMomentum


def test_rank_stat_examples():
    x = np.array([0.3, -1.0, 2.0, 0.0, 5.0, 1.0])
    assert rank_stat_pair_label(x, x.copy(), 5)
    assert not rank_stat_pair_label([5, 4, 3, 2, 1, 0], [10, 9, 8, 7, 0, 1], 5)
    with pytest.raises(ConfigError):
        rank_stat_pair_label([1, 2, 3], [3, 2, 1], 4)


def test_rank_stat_ties_go_to_lower_index():
    mask = top_k_sets(np.array([[1.0, 1.0, 1.0, 0.0]]), 2)
    assert mask[0].tolist() == [True, True, False, False]


def test_effective_k():
    assert effective_k(5, 16) == 5
    assert effective_k(5, 3) == 3


vectors = arrays(np.float64, 7, elements=st.integers(-3, 3).map(float))


@settings(max_examples=200, deadline=None)
@given(vectors, vectors)
def test_rank_stat_symmetric_reflexive(a, b):
    assert rank_stat_pair_label(a, a, 5)
    assert rank_stat_pair_label(a, b, 5) == rank_stat_pair_label(b, a, 5)


def test_rank_stat_pairs_match_pairwise_labels():
    F = np.random.default_rng(0).integers(0, 3, size=(12, 6)).astype(float)
    pairs = rank_stat_pairs(F, 3)
    for p in pairs:
        assert p.same == rank_stat_pair_label(F[p.i], F[p.j], 3)


def _g(model, x):
    return model.predict_proba(x[None, :], "g")[0]


def test_cluster_head_loss_identical_pair():
    m = init_model(HyperbolicLayerSpec((4, 8, 6)), 2, 1.0, 0)
    x = np.array([0.2, -0.4, 1.0, 0.5])
    res = cluster_head_loss(m, np.stack([x, x]), RankStatConfig(5))
    g = _g(m, x)
    assert res.num_pairs == 1
    assert res.loss.item() == pytest.approx(-np.log(g @ g), rel=1e-12)


def test_cluster_head_loss_small_batch_skips():
    m = init_model(HyperbolicLayerSpec((4, 8, 6)), 2, 1.0, 0)
    assert cluster_head_loss(m, np.ones((1, 4))).status == "no-pairs"


def test_stop_gradient_zeroes_backbone_grads():
    m = init_model(HyperbolicLayerSpec((4, 8, 6)), 2, 1.0, 0)
    x = np.random.default_rng(1).normal(size=(10, 4))
    leaves = m.leaves()
    cluster_head_loss(m, x, leaves=leaves, detach_backbone=True).loss.backward()
    for name, leaf in leaves.items():
        if name.startswith("backbone"):
            assert np.all(leaf.grad == 0.0)
    assert np.any(leaves["head_g.W"].grad != 0.0)
    leaves = m.leaves()
    cluster_head_loss(m, x, leaves=leaves).loss.backward()
    assert np.any(leaves["backbone.0.W"].grad != 0.0)


def test_cluster_head_loss_decreases_on_two_blobs():
    rng = np.random.default_rng(0)
    m = init_model(HyperbolicLayerSpec((2, 16, 8)), 2, 1.0, 0)
    opt = SGDMomentum(0.05, 0.9)

    def batch():
        centers = np.where(rng.random(32)[:, None] < 0.5, [[3.0, 3.0]], [[-3.0, -3.0]])
        return centers + 0.3 * rng.normal(size=(32, 2))

    history = []
    for _ in range(200):
        leaves = m.leaves()
        res = cluster_head_loss(m, batch(), leaves=leaves)
        res.loss.backward()
        history.append(res.loss.item())
        m = m.with_params(opt.step(m.params(), {k: v.grad for k, v in leaves.items()}))
    assert np.mean(history[-20:]) < np.mean(history[:20])


def _blobs(seed):
    rng = np.random.default_rng(seed)
    truth = rng.integers(0, 2, size=60)
    X = np.where(truth[:, None] == 1, 10.0, -10.0) + rng.normal(size=(60, 3))
    return X, truth


def test_kmeans_recovers_blobs():
    X, truth = _blobs(0)
    a = kmeans_assign(X, 2, iters=20, seed=0)
    assert np.all(a == truth) or np.all(a == 1 - truth)


def test_kmeans_single_cluster_and_determinism():
    X, _ = _blobs(1)
    assert np.all(kmeans_assign(X, 1, seed=3) == 0)
    assert np.array_equal(kmeans_assign(X, 3, seed=5), kmeans_assign(X, 3, seed=5))


def test_kmeans_objective_non_increasing():
    X = np.random.default_rng(2).normal(size=(80, 4))
    hist = []
    kmeans_assign(X, 5, iters=30, seed=1, history=hist)
    assert all(b <= a + 1e-9 for a, b in zip(hist, hist[1:]))


def test_kmeans_errors():
    with pytest.raises(ConfigError):
        kmeans_assign(np.ones((2, 2)), 3)
    with pytest.raises(ConfigError):
        kmeans_assign(np.ones((4, 2)), 2, iters=0)
