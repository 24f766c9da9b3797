import itertools

import numpy as np
import pytest

from multipoet.clustering import (
    ClusterAssignment,
    abs_correlation_adjacency,
    kmeans,
    misclassification_rate,
    regularized_laplacian,
    rsc_cluster,
)
from multipoet.errors import ClusteringFailed, InvalidInput, InvalidResidualDiagonal


def _block_cov(sizes, within=0.6, seed=0):
    rng = np.random.default_rng(seed)
    p = sum(sizes)
    S = np.zeros((p, p))
    start = 0
    for n in sizes:
        S[start:start + n, start:start + n] = within
        start += n
    np.fill_diagonal(S, 1.0)
    d = rng.uniform(0.5, 3.0, p)
    return S * np.outer(d, d)


def _truth(sizes):
    return np.repeat(np.arange(1, len(sizes) + 1), sizes)


def test_adjacency_examples():
    np.testing.assert_array_equal(abs_correlation_adjacency(np.diag([4.0, 9.0])), np.eye(2))
    A = abs_correlation_adjacency(np.array([[1.0, -0.5], [-0.5, 1.0]]))
    np.testing.assert_allclose(A, [[1, 0.5], [0.5, 1]])


def test_adjacency_block_structure_exact():
    A = abs_correlation_adjacency(_block_cov([3, 4]))
    assert np.all(A[:3, 3:] == 0)
    assert np.all((A >= 0) & (A <= 1))
    np.testing.assert_array_equal(np.diag(A), 1.0)


def test_adjacency_bad_diagonal():
    with pytest.raises(InvalidResidualDiagonal):
        abs_correlation_adjacency(np.diag([1.0, 0.0]))


def test_laplacian_examples():
    np.testing.assert_allclose(regularized_laplacian(np.eye(3), 0.0), np.eye(3))
    ones = np.ones((2, 2))
    np.testing.assert_allclose(regularized_laplacian(ones, 0.0), np.full((2, 2), 0.5))
    np.testing.assert_allclose(regularized_laplacian(ones, "auto"), np.full((2, 2), 0.25))
    np.testing.assert_allclose(regularized_laplacian(ones, 2.0), np.full((2, 2), 0.25))


def test_laplacian_rejects_negative_a():
    with pytest.raises(InvalidInput):
        regularized_laplacian(np.eye(2), -1.0)
    with pytest.raises(InvalidInput):
        regularized_laplacian(np.eye(2), "mean")


def test_kmeans_separated_clouds():
    rng = np.random.default_rng(1)
    X = np.vstack([rng.normal(0, 0.1, (20, 2)), rng.normal(5, 0.1, (15, 2))])
    out = kmeans(X, 2, seed=3)
    assert misclassification_rate(out, _truth([20, 15])) == 0.0


def test_kmeans_n_equals_k():
    X = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 2.0], [5.0, 5.0]])
    out = kmeans(X, 4)
    assert sorted(out.labels) == [1, 2, 3, 4]
    assert out.inertia == 0.0


def test_kmeans_deterministic():
    X = np.random.default_rng(2).standard_normal((60, 3))
    a, b = kmeans(X, 4, seed=11), kmeans(X, 4, seed=11)
    np.testing.assert_array_equal(a.labels, b.labels)
    assert a.inertia == b.inertia


def test_kmeans_validation():
    with pytest.raises(InvalidInput):
        kmeans(np.zeros((3, 2)), 4)
    with pytest.raises(InvalidInput):
        kmeans(np.zeros((3, 2)), 2, restarts=0)


def test_kmeans_all_identical_points_fails():
    # every restart leaves a cluster empty
    with pytest.raises(ClusteringFailed):
        kmeans(np.ones((6, 2)), 3)


def test_assignment_rejects_empty_cluster():
    with pytest.raises(ClusteringFailed):
        ClusterAssignment(np.array([1, 1, 3]), 3, 0.0)


def test_rsc_noiseless_blocks():
    sizes = [10, 14, 8]
    out = rsc_cluster(_block_cov(sizes), 3, seed=0)
    assert misclassification_rate(out, _truth(sizes)) == 0.0


def test_rsc_weak_blocks_recovered():
    sizes = [12, 12, 12, 12]
    out = rsc_cluster(_block_cov(sizes, within=0.1), 4, seed=5)
    assert misclassification_rate(out, _truth(sizes)) == 0.0


def test_rsc_k_equals_p():
    out = rsc_cluster(_block_cov([3, 3]) + np.eye(6), 6)
    assert sorted(out.labels) == list(range(1, 7))


def test_rsc_scale_invariant():
    S = _block_cov([9, 9, 9], within=0.3) + 0.05 * np.random.default_rng(4).standard_normal((27, 27))
    S = (S + S.T) / 2 + 2 * np.eye(27)
    a = rsc_cluster(S, 3, seed=1)
    b = rsc_cluster(42.0 * S, 3, seed=1)
    assert misclassification_rate(a, b.labels) == 0.0


def test_rsc_requires_two_clusters():
    with pytest.raises(InvalidInput):
        rsc_cluster(np.eye(4), 1)


def test_misclassification_examples():
    assert misclassification_rate([1, 1, 2, 2], [1, 1, 2, 2]) == 0.0
    assert misclassification_rate([2, 2, 1, 1], [1, 1, 2, 2]) == 0.0
    assert misclassification_rate([1, 1, 2, 2], [1, 2, 2, 2]) == 0.25


def test_misclassification_shape_mismatch():
    with pytest.raises(InvalidInput):
        misclassification_rate([1, 2], [1, 2, 2])


def _brute(est, tru):
    labels = sorted(set(est) | set(tru))
    best = len(est)
    for perm in itertools.permutations(labels):
        m = dict(zip(labels, perm))
        best = min(best, sum(m[e] != t for e, t in zip(est, tru)))
    return best / len(est)


@pytest.mark.parametrize("K", [2, 3, 4, 5])
def test_misclassification_matches_permutation_search(K):
    rng = np.random.default_rng(K)
    for _ in range(20):
        est = rng.integers(1, K + 1, 25)
        tru = rng.integers(1, K + 1, 25)
        assert misclassification_rate(est, tru) == pytest.approx(_brute(list(est), list(tru)))


def test_misclassification_pseudometric():
    rng = np.random.default_rng(9)
    a, b, c = (rng.integers(1, 4, 30) for _ in range(3))
    assert misclassification_rate(a, b) == pytest.approx(misclassification_rate(b, a))
    assert misclassification_rate(a, c) <= misclassification_rate(a, b) + misclassification_rate(b, c) + 1e-12
    relabel = np.array([0, 3, 1, 2])[a]
    assert misclassification_rate(relabel, b) == pytest.approx(misclassification_rate(a, b))
