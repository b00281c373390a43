import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import brute_serve_cost
from simcache.catalog import Catalog, CostModel
from simcache.gain import total_cost
from simcache.knn_index import LOCAL, REMOTE, LinearScanIndex, serve


@pytest.fixture
def line():
    return Catalog([[0.0], [1.0], [2.0], [3.0]], "l1")


def test_knn_examples(line):
    assert LinearScanIndex(line, [0, 1, 2, 3]).knn([0.0], 2).tolist() == [0, 1]
    assert LinearScanIndex(line, [2, 3]).knn([0.0], 2).tolist() == [2, 3]
    assert LinearScanIndex(line, [0, 1, 2, 3]).knn([1.6], 1).tolist() == [2]


def test_knn_empty_members(line):
    assert LinearScanIndex(line, []).knn([0.0], 3).tolist() == []


def test_add_remove(line):
    idx = LinearScanIndex(line, [])
    idx.add([3])
    idx.add([1])
    assert idx.knn([0.0], 4).tolist() == [1, 3]
    idx.remove([1])
    assert idx.knn([0.0], 4).tolist() == [3]
    with pytest.raises(IndexError):
        idx.add([9])


def test_serve_examples(line):
    cost = CostModel(k=2, h=2, cf=2.0, metric="l1")
    remote = LinearScanIndex(line)
    a = serve(LinearScanIndex(line, [0, 1]), remote, [0.0], cost)
    assert a.entries == [(0, LOCAL, 0.0), (1, LOCAL, 1.0)]
    assert a.total_cost == 1.0
    b = serve(LinearScanIndex(line, [2, 3]), remote, [0.0], cost)
    assert b.entries == [(2, LOCAL, 2.0), (0, REMOTE, 2.0)]
    assert b.total_cost == 4.0
    c = serve(LinearScanIndex(line, []), remote, [0.0], cost)
    assert c.total_cost == 5.0
    assert c.n_remote() == 2


def test_serve_k_too_large(line):
    with pytest.raises(ValueError):
        serve(LinearScanIndex(line, []), LinearScanIndex(line), [0.0], CostModel(k=5, h=1, cf=1.0, metric="l1"))


@settings(max_examples=80, deadline=None)
@given(n=st.integers(2, 8), k=st.integers(1, 3), cf=st.sampled_from([0.0, 0.5, 1.0, 3.0]),
       metric=st.sampled_from(["l1", "sqeuclidean"]), seed=st.integers(0, 10_000))
def test_serve_is_optimal_and_matches_total_cost(n, k, cf, metric, seed):
    k = min(k, n)
    rng = np.random.default_rng(seed)
    pts = rng.integers(0, 4, size=(n, 2)).astype(float)
    r = rng.integers(0, 4, size=2).astype(float)
    cat = Catalog(pts, metric)
    remote = LinearScanIndex(cat)
    for h in range(1, n + 1):
        cost = CostModel(k=k, h=h, cf=cf, metric=metric)
        for combo in itertools.combinations(range(n), h):
            x = np.zeros(n)
            x[list(combo)] = 1
            ans = serve(LinearScanIndex(cat, combo), remote, r, cost)
            assert len(set(ans.ids)) == k
            ref = brute_serve_cost(r, x, pts, k, cf, metric)
            assert ans.total_cost == pytest.approx(ref, abs=1e-12)
            assert total_cost(r, x, cat, cost) == pytest.approx(ref, abs=1e-12)


def test_adding_objects_never_increases_cost():
    rng = np.random.default_rng(1)
    cat = Catalog(rng.normal(size=(12, 3)), "sqeuclidean")
    cost = CostModel(k=3, h=1, cf=1.0)
    remote = LinearScanIndex(cat)
    r = rng.normal(size=3)
    members = []
    prev = serve(LinearScanIndex(cat, members), remote, r, cost).total_cost
    for i in rng.permutation(12):
        members.append(int(i))
        cur = serve(LinearScanIndex(cat, members), remote, r, cost).total_cost
        assert cur <= prev + 1e-12
        prev = cur
