"""Dense symmetric eigendecomposition and matrix norms."""

from __future__ import annotations

from typing import NamedTuple

import numpy as np

from .errors import InvalidMatrix, NotPositiveDefinite

SYMMETRY_RTOL = 1e-10
PSD_TOL = 1e-10


class EigenDecomposition(NamedTuple):
    """Eigenpairs sorted by descending eigenvalue.

    ``eigenvectors[:, i]`` pairs with ``eigenvalues[i]``.
    """

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray


def as_symmetric(M, name: str = "matrix") -> np.ndarray:
    """Validate ``M`` as a finite symmetric matrix and return its symmetrized copy."""
    A = np.asarray(M, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise InvalidMatrix(f"{name} must be square, got shape {A.shape}")
    if not np.all(np.isfinite(A)):
        raise InvalidMatrix(f"{name} has non-finite entries")
    scale = max(1.0, float(np.max(np.abs(A)))) if A.size else 1.0
    if A.size and np.max(np.abs(A - A.T)) > SYMMETRY_RTOL * scale:
        raise InvalidMatrix(f"{name} is not symmetric")
    return (A + A.T) / 2.0


def _fix_signs(V: np.ndarray) -> np.ndarray:
    # largest |component| of each column made positive; argmax picks the lowest index on ties
    if V.size == 0:
        return V
    idx = np.argmax(np.abs(V), axis=0)
    signs = np.sign(V[idx, np.arange(V.shape[1])])
    signs[signs == 0] = 1.0
    return V * signs


def sym_eigen(M) -> EigenDecomposition:
    """Eigendecomposition of a real symmetric matrix.

    Eigenvalues are returned in non-increasing order (ties keep LAPACK's
    order) and each eigenvector is signed so that its entry of largest
    magnitude is positive, which makes the output reproducible.

    Raises
    ------
    InvalidMatrix
        If ``M`` is not square, not finite or not symmetric.
    """
    A = as_symmetric(M)
    w, V = np.linalg.eigh(A)
    order = np.argsort(-w, kind="stable")
    return EigenDecomposition(w[order], _fix_signs(V[:, order]))


def top_eigen(M, k: int) -> EigenDecomposition:
    """The ``k`` leading eigenpairs of ``M`` under the :func:`sym_eigen` conventions."""
    dec = sym_eigen(M)
    return EigenDecomposition(dec.eigenvalues[:k], dec.eigenvectors[:, :k])


def matrix_norm(A, kind: str = "frobenius") -> float:
    """Matrix norm of ``A``.

    ``kind`` is one of ``"frobenius"``, ``"operator"`` (largest singular
    value), ``"max"`` (largest absolute entry) or ``"linf"`` (largest
    absolute row sum).
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    if not np.all(np.isfinite(A)):
        raise InvalidMatrix("matrix has non-finite entries")
    if A.size == 0:
        return 0.0
    if kind == "frobenius":
        return float(np.linalg.norm(A, "fro"))
    if kind == "operator":
        return float(np.linalg.norm(A, 2))
    if kind == "max":
        return float(np.max(np.abs(A)))
    if kind == "linf":
        return float(np.max(np.sum(np.abs(A), axis=1)))
    raise ValueError(f"unknown norm kind {kind!r}")


def min_eigenvalue(M) -> float:
    A = as_symmetric(M)
    return float(np.linalg.eigvalsh(A)[0])


def is_psd(M) -> bool:
    return min_eigenvalue(M) >= -PSD_TOL


def inverse_sqrt(Sigma) -> np.ndarray:
    """Symmetric inverse square root of a positive definite matrix."""
    S = as_symmetric(Sigma, "Sigma")
    w, V = np.linalg.eigh(S)
    if w[0] <= 1e-12:
        raise NotPositiveDefinite(f"minimum eigenvalue {w[0]:.3g} is not positive")
    return (V / np.sqrt(w)) @ V.T


def relative_frobenius(A, Sigma, sigma_inv_sqrt: np.ndarray | None = None) -> float:
    """Relative Frobenius error of the estimate ``A`` against the truth ``Sigma``.

    Returns ``p**-0.5 * ||Sigma^{-1/2} A Sigma^{-1/2} - I||_F``. Pass a
    precomputed ``sigma_inv_sqrt`` to skip the eigendecomposition when the
    same truth is reused across many estimates.
    """
    A = np.asarray(A, dtype=float)
    if sigma_inv_sqrt is None:
        sigma_inv_sqrt = inverse_sqrt(Sigma)
    p = A.shape[0]
    R = sigma_inv_sqrt @ A @ sigma_inv_sqrt - np.eye(p)
    return float(np.linalg.norm(R, "fro") / np.sqrt(p))
