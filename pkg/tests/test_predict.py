import math
from dataclasses import replace

import numpy as np
import pytest
from conftest import make_collection, planted
from hypothesis import given
from hypothesis import strategies as st
from oracles import brute_auc

from colbisbm.network import BipartiteNetwork
from colbisbm.predict import Degradation, degrade, predict_dyads, roc_auc, score_matrix
from colbisbm.vem import FitOptions, VariationalState, fit, hard_tau


def test_auc_examples():
    assert roc_auc([0.9, 0.8, 0.1], [1, 1, 0]) == 1.0
    assert roc_auc([0.4] * 6, [1, 0, 1, 0, 0, 1]) == 0.5
    assert roc_auc([0.3, 0.7, 0.5, 0.2], [0, 1, 0, 1]) == 0.5
    with pytest.raises(ValueError):
        roc_auc([0.1, 0.2], [1, 1])
    with pytest.raises(ValueError):
        roc_auc([0.1, 0.2], [1, 2])
    with pytest.raises(ValueError):
        roc_auc([0.1], [1, 0])


def test_auc_equals_all_pairs_count_on_random_vectors():
    rng = np.random.default_rng(0)
    for _ in range(100):
        n = int(rng.integers(2, 60))
        y = rng.integers(0, 2, n)
        y[0], y[1] = 0, 1
        s = rng.integers(0, 8, n) / 8 if rng.random() < 0.5 else rng.random(n)
        assert roc_auc(s, y) == brute_auc(s.tolist(), y.tolist())


@given(st.lists(st.integers(-20, 20), min_size=4, max_size=30), st.randoms())
def test_auc_invariant_under_increasing_transform(s, r):
    y = [r.randint(0, 1) for _ in s]
    y[0], y[1] = 0, 1
    base = roc_auc(s, y)
    assert roc_auc(np.exp(np.asarray(s)), y) == base
    assert roc_auc(np.asarray(s) ** 3 + 2 * np.asarray(s), y) == base


def test_degrade_missing_dyads_counts():
    net = BipartiteNetwork(np.ones((2, 2), int))
    out, truth = degrade(net, "MissingDyads", 0.5, seed=1)
    assert (~out.observed).sum() == 2
    assert [t[2] for t in truth] == [1, 1]
    for i, j, _ in truth:
        assert not out.observed[i, j] and out.values[i, j] == 0
    again, truth2 = degrade(net, Degradation.MISSING_DYADS, 0.5, seed=1)
    assert truth == truth2 and np.array_equal(again.observed, out.observed)


def test_degrade_missing_links_keeps_dyads_observed(rng):
    net = BipartiteNetwork(rng.integers(0, 2, (10, 12)))
    out, truth = degrade(net, "links", 0.3, seed=0)
    assert len(truth) == math.ceil(0.3 * 120)
    assert out.observed.all()
    assert all(out.values[i, j] == 0 for i, j, _ in truth)


def test_degrade_samples_observed_dyads_only(rng):
    mask = rng.random((8, 8)) > 0.5
    net = BipartiteNetwork(rng.integers(0, 2, (8, 8)), mask)
    _, truth = degrade(net, "dyads", 0.9, seed=0)
    assert len(truth) == mask.sum()
    assert all(mask[i, j] for i, j, _ in truth)


def test_degrade_rejects_bad_probability():
    net = BipartiteNetwork(np.ones((2, 2), int))
    for p in (0.0, 1.0, -0.1):
        with pytest.raises(ValueError):
            degrade(net, "dyads", p)
    with pytest.raises(ValueError):
        degrade(net, "holes", 0.5)


def test_tiny_missing_fraction_leaves_one_class():
    # a single altered all-ones dyad has no negatives to rank against
    net = BipartiteNetwork(np.ones((3, 3), int))
    _, truth = degrade(net, "dyads", 1e-6, seed=0)
    assert len(truth) == 1
    with pytest.raises(ValueError):
        roc_auc([0.5], [t[2] for t in truth])


def test_single_block_scores_are_global_mean(rng):
    x = rng.integers(0, 2, (7, 5))
    coll = make_collection([x])
    res = fit(coll, "iid", 1, 1)
    assert np.allclose(score_matrix(res, 0), x.mean(), atol=1e-12)
    preds = predict_dyads(res, coll, [(0, 0, 0), (0, 6, 4)])
    assert [p.score for p in preds] == pytest.approx([x.mean()] * 2)
    with pytest.raises(IndexError):
        predict_dyads(res, coll, [(0, 7, 0)])
    with pytest.raises(IndexError):
        predict_dyads(res, coll, [(1, 0, 0)])


def test_hard_memberships_score_block_connectivity(rng):
    x, z, w = planted(rng, 12, 10, [[0.8, 0.2], [0.3, 0.6]])
    coll = make_collection([x])
    res = fit(coll, "iid", 2, 2)
    hard = replace(res, state=VariationalState((hard_tau(z, 2, smooth=False),), (hard_tau(w, 2, smooth=False),)))
    s = score_matrix(hard, 0)
    assert np.array_equal(s, res.params.alpha[np.ix_(z, w)])


def test_masked_garbage_does_not_change_refit(rng):
    x, _, _ = planted(rng, 30, 25, [[0.8, 0.2], [0.3, 0.6]])
    net, truth = degrade(BipartiteNetwork(x), "dyads", 0.3, seed=2)
    junk = net.values.copy()
    junk[~net.observed] = 1
    a = fit(make_collection([net.values], masks=[net.observed]), "iid", 2, 2, opts=FitOptions(n_init=2))
    b = fit(make_collection([junk], masks=[net.observed]), "iid", 2, 2, opts=FitOptions(n_init=2))
    assert np.array_equal(a.params.alpha, b.params.alpha)


def test_poisson_scores_positive(rng):
    x = rng.poisson(2.0, (6, 6))
    res = fit(make_collection([x], emission="poisson"), "iid", 2, 1)
    assert np.all(score_matrix(res, 0) > 0)
