import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn.metrics import adjusted_rand_score, silhouette_score

from fedmobfair.clustering import (
    ClusteringError,
    adjusted_rand_index,
    assignment_from_csv,
    kmedoids,
    silhouette,
    to_distance,
)
from fedmobfair.heatmap import SimilarityMatrix


def planted(sizes, within=0.05, across=0.9):
    labels = np.repeat(np.arange(len(sizes)), sizes)
    d = np.where(labels[:, None] == labels[None, :], within, across).astype(float)
    np.fill_diagonal(d, 0.0)
    return d, labels


def random_metric(rng, n):
    pts = rng.random((n, 2))
    return np.sqrt(((pts[:, None] - pts[None]) ** 2).sum(-1))


def test_to_distance_examples():
    sm = SimilarityMatrix(["a", "b", "c"], np.array([[1.0, -1.0, 0.3], [-1.0, 1.0, 0.5], [0.3, 0.5, 1.0]]))
    d = to_distance(sm).values
    assert d[0, 0] == 0.0 and d[0, 1] == 2.0
    assert np.array_equal(d, d.T)


def test_k1_medoid_is_global_minimiser(rng):
    d = random_metric(rng, 12)
    a = kmedoids(d, 1, seed=0)
    assert set(a.labels) == {0}
    assert a.medoids == [int(np.argmin(d.sum(axis=1)))]


def test_k_equals_n_zero_cost(rng):
    d = random_metric(rng, 7)
    a = kmedoids(d, 7, seed=1)
    assert a.cost == 0.0 and sorted(a.labels) == list(range(7))


def test_planted_two_blocks_every_seed():
    d, truth = planted([6, 9])
    for seed in range(10):
        a = kmedoids(d, 2, seed)
        assert adjusted_rand_index(truth, a.labels) == 1.0


def test_k_out_of_range():
    with pytest.raises(ClusteringError):
        kmedoids(np.zeros((3, 3)), 4, 0)


def test_silhouette_examples(rng):
    d, truth = planted([5, 5])
    assert silhouette(d, truth) > 0.8
    assert silhouette(d, truth) == pytest.approx(silhouette_score(d, truth, metric="precomputed"), abs=1e-12)
    vals = []
    for _ in range(20):
        r = rng.random((20, 20))
        r = (r + r.T) / 2
        np.fill_diagonal(r, 0)
        vals.append(silhouette(r, rng.permutation(np.repeat([0, 1], 10))))
    assert abs(np.mean(vals)) < 0.2


def test_silhouette_twin_points_equal_terms():
    d = np.array([[0, 0, 1, 1], [0, 0, 1, 1], [1, 1, 0, 0.2], [1, 1, 0.2, 0]], float)
    labels = np.array([0, 0, 1, 1])
    from sklearn.metrics import silhouette_samples

    s = silhouette_samples(d, labels, metric="precomputed")
    assert s[0] == s[1]
    assert silhouette(d, labels) == pytest.approx(s.mean())


def test_ari_matches_sklearn(rng):
    for _ in range(30):
        a, b = rng.integers(0, 4, 25), rng.integers(0, 3, 25)
        assert adjusted_rand_index(a, b) == pytest.approx(adjusted_rand_score(a, b), abs=1e-12)


def test_assignment_csv_roundtrip(rng):
    a = kmedoids(random_metric(rng, 6), 2, 0, user_ids=list("uvwxyz"))
    assert assignment_from_csv(a.to_csv()) == a.as_dict()


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10**6), st.integers(4, 16), st.integers(1, 4))
def test_cost_monotone_and_terminates(seed, n, k):
    d = random_metric(np.random.default_rng(seed), n)
    a = kmedoids(d, k, seed, max_iters=100)
    assert a.iterations <= 100
    assert all(b <= x + 1e-12 for x, b in zip(a.cost_history, a.cost_history[1:]))
    for c, m in enumerate(a.medoids):
        assert a.labels[m] == c


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10**6))
def test_permutation_invariant_on_blocks(seed):
    rng = np.random.default_rng(seed)
    d, truth = planted([4, 5, 3], within=0.1, across=0.7)
    perm = rng.permutation(len(truth))
    a = kmedoids(d[np.ix_(perm, perm)], 3, seed)
    assert adjusted_rand_index(truth[perm], a.labels) == 1.0
