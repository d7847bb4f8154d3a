import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from colbisbm.network import (
    BipartiteNetwork,
    CollectionError,
    ModelKind,
    NetworkCollection,
    density,
    load_collection,
    read_edgelist,
    write_collection,
)


def test_synthesized_labels_and_shape():
    net = BipartiteNetwork(np.zeros((2, 3), int))
    assert net.row_labels == ("r1", "r2")
    assert net.col_labels == ("c1", "c2", "c3")
    assert net.shape == (2, 3)
    assert net.fully_observed


def test_density_examples():
    assert density(BipartiteNetwork(np.zeros((3, 4), int))) == 0
    net = BipartiteNetwork(np.array([[1, 1], [0, 0]]), np.array([[1, 1], [1, 0]], bool))
    assert density(net) == pytest.approx(2 / 3)
    with pytest.raises(CollectionError):
        density(BipartiteNetwork(np.zeros((1, 1), int), np.zeros((1, 1), bool)))


def test_validation_errors():
    with pytest.raises(CollectionError):
        BipartiteNetwork(np.zeros((0, 3), int))
    with pytest.raises(CollectionError):
        BipartiteNetwork(np.array([[-1]]))
    with pytest.raises(CollectionError):
        BipartiteNetwork(np.zeros((2, 2), int), row_labels=("a", "a"))
    with pytest.raises(CollectionError):
        NetworkCollection((BipartiteNetwork(np.array([[2]])),), "bernoulli")
    NetworkCollection((BipartiteNetwork(np.array([[2]])),), "poisson")


def test_masked_values_are_zeroed():
    net = BipartiteNetwork(np.array([[1, 5]]), np.array([[True, False]]))
    assert net.values.tolist() == [[1, 0]]


def test_one_by_one_manifest(tmp_path):
    (tmp_path / "a.tsv").write_text("0\n")
    (tmp_path / "m.json").write_text(json.dumps({"emission": "bernoulli", "networks": [{"name": "a", "format": "dense", "path": "a.tsv"}]}))
    coll = load_collection(tmp_path / "m.json")
    assert coll.M == 1 and density(coll[0]) == 0


def test_edgelist_na_token(tmp_path):
    p = tmp_path / "e.csv"
    p.write_text("row,col,value\nr1,c1,1\nr1,c2,NA\nr2,c2,1\n")
    net = read_edgelist(p)
    assert net.observed[0, 1] == False  # noqa: E712
    assert net.values[0, 1] == 0
    assert net.values[0, 0] == 1 and net.values[1, 0] == 0 and net.observed[1, 0]


def test_load_errors(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_collection(tmp_path / "missing.json")
    (tmp_path / "a.tsv").write_text("0\t2\n")
    (tmp_path / "m.json").write_text(json.dumps({"networks": [{"path": "a.tsv"}]}))
    with pytest.raises(CollectionError):
        load_collection(tmp_path / "m.json")
    (tmp_path / "rows.txt").write_text("x\ny\n")
    (tmp_path / "b.tsv").write_text("0\t1\n")
    (tmp_path / "m2.json").write_text(json.dumps({"networks": [{"path": "b.tsv", "row_labels": "rows.txt"}]}))
    with pytest.raises(CollectionError):
        load_collection(tmp_path / "m2.json")


def test_model_kind_sides():
    assert ModelKind.parse("PiRho") is ModelKind.PIRHO
    assert ModelKind.PI.free_rows and not ModelKind.PI.free_cols
    assert ModelKind.RHO.free_cols and not ModelKind.RHO.free_rows
    assert not ModelKind.IID.free_rows and not ModelKind.IID.free_cols


matrices = st.tuples(st.integers(1, 6), st.integers(1, 6)).flatmap(
    lambda s: st.tuples(arrays(np.int64, s, elements=st.integers(0, 1)), arrays(bool, s))
)


@given(st.lists(matrices, min_size=1, max_size=3), st.sampled_from(["dense", "edgelist"]))
def test_round_trip(tmp_path_factory, mats, fmt):
    d = tmp_path_factory.mktemp("rt")
    coll = NetworkCollection(tuple(BipartiteNetwork(x, k, name=f"n{i}") for i, (x, k) in enumerate(mats)))
    back = load_collection(write_collection(coll, d, fmt=fmt))
    assert back.M == coll.M
    for a, b in zip(coll, back):
        assert np.array_equal(a.values, b.values)
        assert np.array_equal(a.observed, b.observed)
        assert a.row_labels == b.row_labels and a.col_labels == b.col_labels


@given(arrays(np.int64, (4, 5), elements=st.integers(0, 1)), arrays(bool, (4, 5)), st.randoms())
def test_density_permutation_invariant(x, k, rnd):
    k[0, 0] = True
    net = BipartiteNetwork(x, k)
    r = list(range(4))
    c = list(range(5))
    rnd.shuffle(r)
    rnd.shuffle(c)
    perm = BipartiteNetwork(x[r][:, c], k[r][:, c])
    assert density(perm) == density(net)
