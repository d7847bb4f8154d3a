from dataclasses import replace

import numpy as np
import pytest
from conftest import make_collection
from hypothesis import given
from hypothesis import strategies as st
from oracles import set_partition_count

from colbisbm.partition import (
    dissimilarity,
    exhaustive_partition,
    recursive_partition,
    set_partitions,
    split_indices,
    split_once,
)
from colbisbm.selection import SelectOptions, select_blocks
from colbisbm.simulate import Design, SimDesign, ari, build_alpha, sample_collection
from colbisbm.vem import FitOptions, VariationalState, fit

FAST = SelectOptions(fit=FitOptions(n_init=3, max_inner=1))
BASE = np.array([0.2, 0.3, 0.5])


def typed_collection(structures, n=50, eps=0.4, seed=0):
    spec = tuple((build_alpha(Design.PARTITION_TRIPLE, eps, s), BASE, BASE, n, n) for s in structures)
    groups = tuple({"as": 0, "dis": 1, "cp": 2}[s] for s in structures)
    return sample_collection(SimDesign(Design.CUSTOM, custom=spec, groups=groups), seed=seed)


def test_dissimilarity_scalar_example():
    a = np.zeros((10, 10), int)
    a.flat[:30] = 1
    b = np.zeros((10, 10), int)
    b.flat[:50] = 1
    coll = make_collection([a, b])
    D = dissimilarity(coll, fit(coll, "iid", 1, 1))
    assert D[0, 1] == pytest.approx(0.04, abs=1e-15)
    assert D[1, 0] == D[0, 1] and D[0, 0] == 0


def test_identical_networks_have_zero_dissimilarity(rng):
    x = rng.integers(0, 2, (12, 9))
    coll = make_collection([x, x.copy()])
    res = fit(coll, "iid", 2, 2)
    same = VariationalState((res.state.tau1[0],) * 2, (res.state.tau2[0],) * 2)
    assert dissimilarity(coll, replace(res, state=same))[0, 1] == 0


@given(st.integers(0, 10_000))
def test_dissimilarity_symmetric_nonnegative(seed):
    rng = np.random.default_rng(seed)
    M = int(rng.integers(2, 5))
    coll = make_collection([rng.integers(0, 2, (int(rng.integers(4, 10)), int(rng.integers(4, 10)))) for _ in range(M)])
    D = dissimilarity(coll, fit(coll, "pirho", 2, 2, opts=FitOptions(n_init=1, seed=seed)))
    assert np.array_equal(D, D.T)
    assert np.all(np.diag(D) == 0) and np.all(D >= 0)


def test_split_indices_small_cases():
    assert split_indices(np.zeros((2, 2))) == ([0], [1])
    with pytest.raises(ValueError):
        split_indices(np.zeros((1, 1)))
    D = np.array([[0, 0.1, 5, 5], [0.1, 0, 5, 5], [5, 5, 0, 0.2], [5, 5, 0.2, 0]])
    assert split_indices(D) == ([0, 1], [2, 3])
    a, b = split_indices(np.zeros((4, 4)))
    assert a and b and sorted(a + b) == [0, 1, 2, 3]


def test_split_once_two_networks_and_singleton(rng):
    coll = make_collection([rng.integers(0, 2, (5, 5)) for _ in range(3)])
    assert split_once(coll, (0, 2), "iid", FAST) == ((0,), (2,))
    with pytest.raises(ValueError):
        split_once(coll, (1,), "iid", FAST)


@pytest.mark.parametrize("n", range(0, 8))
def test_set_partition_counts(n):
    parts = list(set_partitions(range(n)))
    assert len(parts) == set_partition_count(n)
    assert len({tuple(sorted(tuple(sorted(g)) for g in p)) for p in parts}) == len(parts)


def test_bell_numbers():
    assert len(list(set_partitions(range(5)))) == 52
    assert len(list(set_partitions([7]))) == 1
    assert len(list(set_partitions(range(3)))) == 5


def test_split_recovers_two_planted_types():
    sim = typed_collection(["as"] * 4 + ["dis"] * 4, seed=1)
    a, b = split_once(sim.collection, range(8), "iid", FAST)
    assert sorted([sorted(a), sorted(b)]) == [[0, 1, 2, 3], [4, 5, 6, 7]]


def test_single_network_partition(rng):
    coll = make_collection([rng.integers(0, 2, (15, 12))])
    part = recursive_partition(coll, "iid", FAST)
    assert part.groups == ((0,),)
    assert part.score == pytest.approx(select_blocks(coll, "iid", FAST).bicl)


@pytest.fixture(scope="module")
def three_types():
    return typed_collection(["as", "dis", "as"], n=60, seed=2)


def test_exhaustive_dominates_recursive(three_types):
    coll = three_types.collection
    rec = recursive_partition(coll, "iid", FAST)
    exh = exhaustive_partition(coll, "iid", FAST)
    assert exh.n_evaluated == 5
    assert exh.score >= rec.score - 1e-9
    assert rec.score >= rec.trajectory[0] - 1e-9
    covered = sorted(i for g in rec.groups for i in g)
    assert covered == [0, 1, 2]
    assert rec.score == pytest.approx(sum(s.bicl for s in rec.selections))


def test_partition_invariant_to_network_order(three_types):
    coll = three_types.collection
    order = [2, 0, 1]
    a = recursive_partition(coll, "iid", FAST)
    b = recursive_partition(coll.subset(order), "iid", FAST)
    assert ari(a.labels(), b.labels()[np.argsort(order)]) == pytest.approx(1.0)


def test_exhaustive_guard(rng):
    coll = make_collection([rng.integers(0, 2, (3, 3)) for _ in range(4)])
    with pytest.raises(ValueError):
        exhaustive_partition(coll, "iid", FAST, max_networks=3)


def test_homogeneous_collection_is_not_split():
    sim = typed_collection(["cp"] * 4, n=50, seed=4)
    part = recursive_partition(sim.collection, "iid", FAST)
    assert len(part.groups) == 1
