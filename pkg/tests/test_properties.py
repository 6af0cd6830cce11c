"""Randomized invariants, 1000+ generated cases each."""

import math

import numpy as np
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st

from oracles import bh_with_floor
from teamfdr.ingest import MarkerMatrix, quantile_normalize
from teamfdr.nulldist import (NullCache, binomial_dist, build_layer_null, convolve, leaf_null,
                              truncate_renormalize)
from teamfdr.partition import PartitionSpec, build_partition
from teamfdr.team import StoppingRule, a_floor, find_threshold, run_team_counts

CASES = settings(max_examples=1000, deadline=None, derandomize=True,
                 suppress_health_check=[HealthCheck.too_slow])

thetas = st.floats(0.02, 0.98)
sizes = st.integers(0, 150)


@st.composite
def dists(draw):
    n = draw(sizes)
    d = binomial_dist(n, draw(thetas))
    if n and draw(st.booleans()):
        d = truncate_renormalize(d, draw(st.integers(0, n)))
    return d


@CASES
@given(n=st.integers(0, 3000), theta=thetas)
def test_binomial_normalized(n, theta):
    d = binomial_dist(n, theta)
    assert d.pmf.min() >= 0
    assert abs(math.fsum(d.pmf) - 1.0) <= 1e-12


@CASES
@given(d=dists())
def test_ccdf_nonincreasing(d):
    g = d.ccdf(np.arange(-2, d.support_max + 3))
    assert np.all(np.diff(g) <= 0)
    assert g[0] == 1.0 and g[-1] == 0.0 and d.ccdf(d.support_max) == 0.0


@CASES
@given(a=dists(), b=dists(), c=dists())
def test_convolution_algebra(a, b, c):
    ab = convolve(a, b)
    assert abs(math.fsum(ab.pmf) - 1.0) <= 1e-12 and ab.pmf.min() >= 0
    np.testing.assert_allclose(ab.pmf, convolve(b, a).pmf, rtol=0, atol=1e-12)
    np.testing.assert_allclose(convolve(ab, c).pmf, convolve(a, convolve(b, c)).pmf,
                               rtol=0, atol=1e-12)


@CASES
@given(n1=st.integers(1, 120), n2=st.integers(1, 120), theta=thetas,
       c=st.floats(1e-4, 0.3))
def test_layer_null_memo_transparent(n1, n2, theta, c):
    a, b = leaf_null(n1, theta), leaf_null(n2, theta)
    if a.dist.tail[0] <= c or b.dist.tail[0] <= c:
        return  # a child that cannot survive is rejected upstream
    cache = NullCache()
    first = build_layer_null(a, b, c, cache)
    again = build_layer_null(a, b, c, cache)
    plain = build_layer_null(a, b, c)
    assert again is first and cache.hits == 1
    assert np.array_equal(first.dist.pmf, plain.dist.pmf)
    assert first.dist.support_max == first.children[0].bhat + first.children[1].bhat


@st.composite
def count_vectors(draw, max_m=200):
    m = draw(st.integers(4, max_m))
    seed = draw(st.integers(0, 2 ** 32 - 1))
    rng = np.random.default_rng(seed)
    n = rng.integers(0, 60, size=m)
    n[rng.integers(m)] += 1
    theta = rng.uniform(0.2, 0.8)
    # a random subset of leaves is enriched for cohort 2
    lift = np.where(rng.random(m) < draw(st.floats(0, 0.4)), rng.uniform(0, 0.2), 0.0)
    X = rng.binomial(n, np.minimum(theta + lift, 0.99))
    if X.sum() == 0:
        X[np.argmax(n)] = 1
    if X.sum() == n.sum():
        X[np.argmax(n)] -= 1
    return n, X


@CASES
@given(data=count_vectors(), alpha=st.floats(0.01, 0.3), layers=st.integers(1, 6))
def test_team_layer_invariants(data, alpha, layers):
    n, X = data
    res = run_team_counts(n, X, alpha, StoppingRule(max_layers=layers), keep_states=True)
    # each rejected leaf records a single layer, so the per-layer sets are disjoint
    by_layer = [set(res.rejection_set(l).tolist()) for l in range(1, res.stop_layer + 1)]
    assert sum(map(len, by_layer)) == len(set().union(*by_layer)) == res.rejected.sum()
    previously = set()
    for state, rec in zip(res.states, res.layers):
        assert state.leaf_sets.shape[1] == 2 ** (state.layer - 1)
        assert np.all(np.diff(state.leaf_sets, axis=1) > 0)
        assert np.all(state.X <= state.n)
        assert not previously & set(state.leaf_sets.ravel().tolist())
        assert rec.a_floor == a_floor(rec.m_layer)
        assert rec.c_hat >= rec.a_floor
        if rec.m_layer * math.log(rec.m_layer) >= 1 / alpha:
            assert rec.c_hat <= alpha
        assert np.array_equal(state.rejected, state.pvalues <= state.c_hat)
        # the leftover is the unpaired node carried over from the layer below
        if state.layer > 1:
            assert len(rec.leftover) in (0, 2 ** (state.layer - 2))
        previously |= set(res.rejection_set(state.layer).tolist())


@CASES
@given(data=count_vectors(), alpha=st.floats(0.01, 0.2), bump=st.floats(0.0, 0.2))
def test_layer_one_alpha_monotone(data, alpha, bump):
    n, X = data
    one = StoppingRule(max_layers=1)
    small = run_team_counts(n, X, alpha, one).rejected
    large = run_team_counts(n, X, alpha + bump, one).rejected
    assert not np.any(small & ~large)


@CASES
@given(m=st.integers(2, 400), seed=st.integers(0, 2 ** 32 - 1), alpha=st.floats(0.001, 0.5))
def test_threshold_matches_bh_oracle(m, seed, alpha):
    rng = np.random.default_rng(seed)
    p = np.where(rng.random(m) < 0.3, rng.random(m) * alpha, rng.random(m))
    c = find_threshold(p, alpha)
    assert c == bh_with_floor(p, alpha)[0]


@CASES
@given(data=count_vectors(max_m=64), alpha=st.floats(0.01, 0.2))
def test_team_deterministic(data, alpha):
    n, X = data
    a = run_team_counts(n, X, alpha, StoppingRule(max_layers=4))
    b = run_team_counts(n, X, alpha, StoppingRule(max_layers=4))
    assert a.rejection_layer.tobytes() == b.rejection_layer.tobytes()
    assert a.p_first.tobytes() == b.p_first.tobytes()
    assert a.summary() == b.summary()


@st.composite
def matrices(draw):
    N = draw(st.integers(16, 300))
    p = draw(st.integers(1, 3))
    rng = np.random.default_rng(draw(st.integers(0, 2 ** 32 - 1)))
    values = rng.standard_normal((N, p))
    if draw(st.booleans()):
        values = np.round(values, 1)  # plenty of ties
    cohort = rng.integers(1, 3, size=N)
    cohort[:2] = [1, 2]
    return MarkerMatrix(values, cohort, tuple(f"m{j}" for j in range(p)))


@CASES
@given(matrix=matrices(), bins=st.integers(2, 4), adaptive=st.booleans())
def test_partition_conservation_and_determinism(matrix, bins, adaptive):
    spec = PartitionSpec("adaptive" if adaptive else "sequential", bins)
    try:
        b = build_partition(matrix, spec)
    except ValueError:
        return  # too few distinct values for the requested resolution
    assert b.n.sum() == matrix.n_rows and b.X.sum() == matrix.n2 and b.Xtilde.sum() == matrix.n1
    assert np.array_equal(b.n, b.X + b.Xtilde)
    expected_m = 2 ** bins if adaptive else bins ** matrix.n_markers
    assert b.m == expected_m and np.bincount(b.row_leaf, minlength=b.m).tolist() == b.n.tolist()
    again = build_partition(matrix, spec)
    assert np.array_equal(again.row_leaf, b.row_leaf)


@CASES
@given(size=st.integers(2, 40), samples=st.integers(2, 4), seed=st.integers(0, 2 ** 32 - 1))
def test_quantile_normalize_ranks_and_idempotence(size, samples, seed):
    rng = np.random.default_rng(seed)
    scale = rng.uniform(0.5, 3, samples).repeat(size)[:, None]
    values = rng.standard_normal((size * samples, 2)) * scale
    sample_id = np.arange(samples).repeat(size)
    cohort = np.where(sample_id % 2, 2, 1)
    m = MarkerMatrix(values, cohort, ("a", "b"), sample_id)
    once = quantile_normalize(m)
    for s in range(samples):
        rows = sample_id == s
        for j in range(2):
            before, after = values[rows, j], once.values[rows, j]
            order = np.argsort(before)
            assert np.all(np.diff(after[order]) >= 0)
    assert np.array_equal(quantile_normalize(once).values, once.values)
