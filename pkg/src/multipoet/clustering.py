"""Regularized spectral clustering (RSC) for unknown local group membership.

The input is a covariance with the global factors already removed. Its
absolute correlations form a weighted graph, the degree-regularized
normalized adjacency is embedded through its top eigenvectors, and k-means
on the embedded rows returns the groups.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from .errors import ClusteringFailed, InvalidInput, InvalidResidualDiagonal
from .linalg import as_symmetric, top_eigen

MAX_ITER = 300
DEFAULT_RESTARTS = 10


@dataclass(frozen=True)
class ClusterAssignment:
    """Cluster labels in ``1..K`` and the k-means objective of the best restart."""

    labels: np.ndarray
    K: int
    inertia: float

    def __post_init__(self):
        labels = np.asarray(self.labels, dtype=int)
        if np.any(np.bincount(labels, minlength=self.K + 1)[1:] == 0):
            raise ClusteringFailed("assignment leaves a cluster empty")
        labels.setflags(write=False)
        object.__setattr__(self, "labels", labels)


def abs_correlation_adjacency(Sigma_E) -> np.ndarray:
    """Absolute correlation matrix ``|s_ij| / sqrt(s_ii s_jj)`` clipped to ``[0, 1]``."""
    S = as_symmetric(Sigma_E, "Sigma_E")
    d = np.diag(S)
    if np.any(d <= 0):
        i = int(np.flatnonzero(d <= 0)[0])
        raise InvalidResidualDiagonal(f"variance of asset {i} is {d[i]:.3g}")
    s = np.sqrt(d)
    A = np.clip(np.abs(S) / np.outer(s, s), 0.0, 1.0)
    np.fill_diagonal(A, 1.0)
    return A


def regularized_laplacian(L, a="auto") -> np.ndarray:
    """``D_a^{-1/2} L D_a^{-1/2}`` with ``D_a = diag(row sums) + a I``.

    ``a="auto"`` uses the average node degree.
    """
    A = as_symmetric(L, "adjacency")
    deg = A.sum(axis=1)
    if isinstance(a, str):
        if a != "auto":
            raise InvalidInput(f"regularization must be a number or 'auto', got {a!r}")
        a = float(deg.mean())
    if not a >= 0:
        raise InvalidInput(f"regularization must be nonnegative, got {a}")
    da = deg + a
    if np.any(da <= 0):
        raise InvalidInput("regularized degree must be positive; pass a > 0 for isolated nodes")
    w = 1.0 / np.sqrt(da)
    out = A * np.outer(w, w)
    return (out + out.T) / 2.0


def _plus_plus(X: np.ndarray, K: int, rng: np.random.Generator) -> np.ndarray:
    n = X.shape[0]
    centers = np.empty((K, X.shape[1]))
    centers[0] = X[rng.integers(n)]
    d2 = np.sum((X - centers[0]) ** 2, axis=1)
    for c in range(1, K):
        total = d2.sum()
        if total <= 0:
            # fewer distinct points than clusters so far; pick uniformly
            i = rng.integers(n)
        else:
            i = int(np.searchsorted(np.cumsum(d2), rng.random() * total, side="right"))
            i = min(i, n - 1)
        centers[c] = X[i]
        d2 = np.minimum(d2, np.sum((X - centers[c]) ** 2, axis=1))
    return centers


def _sq_dist(X: np.ndarray, C: np.ndarray) -> np.ndarray:
    d = np.sum(X**2, axis=1)[:, None] - 2.0 * X @ C.T + np.sum(C**2, axis=1)[None, :]
    return np.maximum(d, 0.0)


def _lloyd(X: np.ndarray, centers: np.ndarray):
    K = centers.shape[0]
    labels = np.full(X.shape[0], -1)
    for _ in range(MAX_ITER):
        new = np.argmin(_sq_dist(X, centers), axis=1)
        if np.array_equal(new, labels):
            break
        labels = new
        counts = np.bincount(labels, minlength=K)
        if np.any(counts == 0):
            return labels, np.inf
        sums = np.zeros_like(centers)
        np.add.at(sums, labels, X)
        centers = sums / counts[:, None]
    inertia = float(np.sum((X - centers[labels]) ** 2))
    return labels, inertia


def kmeans(rows, K: int, seed: int = 0, restarts: int = DEFAULT_RESTARTS) -> ClusterAssignment:
    """Best-of-``restarts`` Lloyd iterations from k-means++ starts.

    Each restart stops when the assignment no longer changes or after 300
    iterations. Restarts that end with an empty cluster are discarded.

    Raises
    ------
    ClusteringFailed
        If every restart ends with an empty cluster.
    """
    X = np.asarray(rows, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    n = X.shape[0]
    if not 1 <= K <= n:
        raise InvalidInput(f"need 1 <= K <= {n}, got K={K}")
    if restarts < 1:
        raise InvalidInput(f"restarts must be at least 1, got {restarts}")
    if not np.all(np.isfinite(X)):
        raise InvalidInput("rows have non-finite entries")
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(int(seed))))
    best_labels, best = None, np.inf
    for _ in range(restarts):
        labels, inertia = _lloyd(X, _plus_plus(X, K, rng))
        if inertia < best:
            best_labels, best = labels, inertia
    if best_labels is None:
        raise ClusteringFailed(f"all {restarts} restarts ended with an empty cluster")
    return ClusterAssignment(best_labels + 1, K, best)


def spectral_embedding(Sigma_E, K: int) -> np.ndarray:
    """Top-``K`` eigenvectors of the regularized Laplacian of ``|corr(Sigma_E)|``."""
    Lt = regularized_laplacian(abs_correlation_adjacency(Sigma_E), "auto")
    return top_eigen(Lt, K).eigenvectors


def rsc_cluster(Sigma_E_hat, K: int, seed: int = 0, restarts: int = DEFAULT_RESTARTS) -> ClusterAssignment:
    """Group assets by regularized spectral clustering of ``Sigma_E_hat``."""
    S = as_symmetric(Sigma_E_hat, "Sigma_E_hat")
    p = S.shape[0]
    if not 2 <= K <= p:
        raise InvalidInput(f"need 2 <= K <= {p}, got K={K}")
    return kmeans(spectral_embedding(S, K), K, seed, restarts)


def misclassification_rate(estimated, truth) -> float:
    """Fraction of assets mislabeled under the best matching of cluster labels.

    The matching maximizes agreement over all one-to-one label maps
    (Hungarian algorithm on the contingency table), so the rate is
    invariant to relabeling either argument.
    """
    est = np.asarray(getattr(estimated, "labels", estimated))
    tru = np.asarray(getattr(truth, "membership", truth))
    if est.ndim != 1 or est.shape != tru.shape:
        raise InvalidInput(f"label vectors differ in shape: {est.shape} vs {tru.shape}")
    if est.size == 0:
        raise InvalidInput("empty label vectors")
    _, e = np.unique(est, return_inverse=True)
    _, t = np.unique(tru, return_inverse=True)
    table = np.zeros((e.max() + 1, t.max() + 1), dtype=int)
    np.add.at(table, (e, t), 1)
    rows, cols = linear_sum_assignment(table, maximize=True)
    return float(1.0 - table[rows, cols].sum() / est.size)
