import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import random_capped_simplex
from simcache import oma
from simcache.catalog import Catalog, CostModel, rank
from simcache.gain import caching_gain


def test_initial_state():
    assert oma.initial_state(4, 2).tolist() == [0.5] * 4
    assert np.allclose(oma.initial_state(900, 15), 1 / 60)
    assert oma.initial_state(3, 3).tolist() == [1.0] * 3
    with pytest.raises(ValueError):
        oma.initial_state(2, 3)


def test_projection_examples():
    assert np.allclose(oma.project_negentropy([0.6, 0.6], 1), [0.5, 0.5])
    assert np.allclose(oma.project_negentropy([0.8, 0.2], 1), [0.8, 0.2])
    assert np.allclose(oma.project_negentropy([2.0, 1.0, 0.5], 2), [1.0, 2 / 3, 1 / 3])
    assert np.allclose(oma.project_negentropy_bisect([2.0, 1.0, 0.5], 2), [1.0, 2 / 3, 1 / 3])
    with pytest.raises(ValueError):
        oma.project_negentropy([1.0, 0.0], 1)
    with pytest.raises(ValueError):
        oma.project_negentropy([1.0, 2.0], 3)


def test_euclidean_projection_examples():
    assert np.allclose(oma.project_euclidean([0.6, 0.6], 1), [0.5, 0.5])
    assert np.allclose(oma.project_euclidean([2.0, 0.0, -1.0], 1), [1.0, 0.0, 0.0])
    y = oma.project_euclidean([0.9, 0.9, 0.9, -3.0], 2)
    assert y.sum() == pytest.approx(2.0)
    assert np.allclose(y[:3], 2 / 3)


@settings(max_examples=200, deadline=None)
@given(n=st.integers(1, 60), frac=st.floats(0.01, 1.0), spread=st.floats(0.1, 30.0), seed=st.integers(0, 10**6))
def test_negentropy_projection_kkt(n, frac, spread, seed):
    rng = np.random.default_rng(seed)
    h = max(1, min(n, int(round(frac * n))))
    z = np.exp(rng.normal(scale=spread, size=n).clip(-600, 600))
    z = np.maximum(z, 1e-250)
    y = oma.project_negentropy(z, h)
    assert abs(y.sum() - h) <= 1e-9
    assert np.all((y >= 0) & (y <= 1))
    free = y < 1
    if free.any():
        theta = np.median(y[free] / z[free])
        assert np.allclose(y[free], theta * z[free], rtol=1e-9, atol=0)
        assert np.all(theta * z[~free] >= 1 - 1e-9)
    assert np.allclose(y, oma.project_negentropy_bisect(z, h), atol=1e-8)


def test_pythagorean_inequality():
    rng = np.random.default_rng(0)
    for _ in range(200):
        n = int(rng.integers(2, 30))
        h = int(rng.integers(1, n + 1))
        z = np.exp(rng.normal(size=n))
        y = oma.project_negentropy(z, h)
        p = np.maximum(random_capped_simplex(rng, n, h), 1e-12)
        p *= h / p.sum()
        if p.max() > 1:
            continue
        assert oma.bregman_divergence(p, z, "negentropy") >= oma.bregman_divergence(p, y, "negentropy") - 1e-9


def test_oma_step_examples():
    y = np.array([0.25, 0.25, 0.5])
    assert np.allclose(oma.oma_step(y, np.zeros(3), 0.3, "negentropy", 1), y)
    assert np.allclose(oma.oma_step(y, np.zeros(3), 0.3, "euclidean", 1), y)
    # multiplicative step on two components: (1.5, 0.5) scaled to sum 1 without hitting the cap
    y2 = oma.oma_step(np.array([0.5, 0.5]), np.array([np.log(3.0), 0.0]), 1.0, "negentropy", 1)
    assert np.allclose(y2, [0.75, 0.25])
    assert y2[0] > 0.5 > y2[1]
    g = np.array([0.1, -0.05, -0.05])
    assert np.allclose(oma.oma_step(y, g, 0.5, "euclidean", 1), y + 0.5 * g)


def test_oma_step_extreme_gradient_stays_feasible():
    y = np.full(5, 0.4)
    y2 = oma.oma_step(y, np.array([1e6, -1e6, 0, 0, 0]), 10.0, "negentropy", 2)
    assert y2.sum() == pytest.approx(2.0)
    assert np.all(y2 > 0) and np.all(y2 <= 1)


def _fd_gradient(r, y, cat, cost, eps=1e-6):
    g = np.zeros(y.size)
    for i in range(y.size):
        e = np.zeros(y.size)
        e[i] = eps
        g[i] = (caching_gain(r, y + e, cat, cost) - caching_gain(r, y - e, cat, cost)) / (2 * eps)
    return g


def test_subgradient_line_instance(line4):
    cat, cost = line4
    y = np.full(4, 0.25)
    g = oma.subgradient([0.0], y, cat, cost)
    assert np.allclose(g, _fd_gradient([0.0], y, cat, cost), atol=1e-4)


def test_subgradient_integral_top_k():
    rng = np.random.default_rng(2)
    cat = Catalog(rng.normal(size=(15, 2)), "sqeuclidean")
    cost = CostModel(k=3, h=3, cf=1.0)
    r = rng.normal(size=2)
    top = np.argsort(cat.distances(r))[:3]
    x = np.zeros(15)
    x[top] = 1.0
    g = oma.subgradient(r, x, cat, cost)
    assert np.all(g[top] >= 0)
    far = np.argsort(cat.distances(r))[-5:]
    assert np.all(g[far] == 0)


def test_subgradient_flat_gain():
    cat = Catalog(np.zeros((5, 2)), "l1")
    cost = CostModel(k=2, h=2, cf=0.0, metric="l1")
    assert np.all(oma.subgradient([0, 0], np.full(5, 0.4), cat, cost) == 0)


@settings(max_examples=100, deadline=None)
@given(n=st.integers(2, 12), k=st.integers(1, 4), cf=st.floats(0.1, 4.0), seed=st.integers(0, 10**6))
def test_supergradient_inequality(n, k, cf, seed):
    k = min(k, n)
    rng = np.random.default_rng(seed)
    cat = Catalog(rng.normal(size=(n, 2)), "sqeuclidean")
    h = int(rng.integers(1, n + 1))
    cost = CostModel(k=k, h=h, cf=cf)
    r = rng.normal(size=2)
    rk = rank(r, cat, cost)
    y = random_capped_simplex(rng, n, h)
    y2 = random_capped_simplex(rng, n, h)
    g = oma.subgradient(r, y, cat, cost, rk)
    assert caching_gain(r, y2, cat, cost, rk) <= caching_gain(r, y, cat, cost, rk) + g @ (y2 - y) + 1e-9


def test_schedules():
    s = oma.Schedule("cosine", T=100, cf=2.0)
    assert s(0) == pytest.approx(2.0)
    assert s(100) == pytest.approx(0.0)
    assert s(50) == pytest.approx(1.0)
    th = oma.Schedule("theorem", T=400, cf=1.0, cdk=1.0, n=100, h=10)
    assert th(1) == pytest.approx(np.sqrt(2 * np.log(10) / 400) / 2.0)
    assert oma.Schedule("constant", eta=0.3)(7) == 0.3
    with pytest.raises(ValueError):
        oma.Schedule("linear")


def test_mirror_ascent_zero_rate_keeps_state():
    m = oma.MirrorAscent(6, 2, schedule=oma.Schedule("constant", eta=0.0))
    y0 = m.y
    assert m.step(np.ones(6)) is y0


def test_active_set():
    assert oma.active_set(np.array([0.5, 1e-9, 0.2, 1e-12])).tolist() == [0, 2]


def test_estimate_cdk():
    cat = Catalog([[0.0], [1.0], [3.0]], "l1")
    assert oma.estimate_cdk([[0.0], [3.0]], cat, 2) == 2.0
