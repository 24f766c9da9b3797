"""Eigenvalue-ratio choice of the global and local factor counts."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import InvalidInput, InvalidKMax
from .linalg import sym_eigen

EIG_FLOOR = 1e-12
DEFAULT_PHI_SCALE = 0.3


@dataclass(frozen=True)
class ModelSelection:
    """Outcome of the modified eigenvalue-ratio (MER) rule.

    ``k1`` and ``k2`` index the largest and second largest ratios, ``er1``
    and ``er2`` are their values and ``ratios`` holds ``ER(1..k_max)``.
    """

    variant: str
    k_hat: int
    k1: int
    k2: int
    er1: float
    er2: float
    phi_p: float
    ratios: np.ndarray


def eigenvalue_ratios(eigenvalues, k_max: int) -> np.ndarray:
    """``ER(m) = d_m / d_{m+1}`` for ``m = 1..k_max`` on a descending spectrum.

    Eigenvalues are floored at ``1e-12`` first.
    """
    d = np.asarray(eigenvalues, dtype=float)
    if k_max < 1 or k_max >= d.size:
        raise InvalidKMax(f"k_max={k_max} needs 1 <= k_max < {d.size}")
    d = np.maximum(d[: k_max + 1], EIG_FLOOR)
    return d[:-1] / d[1:]


def _argmax(x: np.ndarray) -> int:
    # np.argmax already returns the first (smallest-index) maximizer
    return int(np.argmax(x))


def default_phi(p: int, scale: float = DEFAULT_PHI_SCALE) -> float:
    return scale * math.log(p)


def mer_from_eigenvalues(eigenvalues, k_max: int, phi_p: float, local_factors: bool = False) -> ModelSelection:
    """Apply the MER rule to a descending spectrum.

    With two ratios above ``phi_p`` the model is multi-level and
    ``k_hat = min(k1, k2)``. With one, it is single-level and
    ``k_hat = k1``, unless ``local_factors`` is set: the caller then knows
    the data carry a local level, so a lone spike is read as that level and
    the global count is 0. With none, ``k_hat = 0``.
    """
    if not phi_p > 0:
        raise InvalidInput(f"phi_p must be positive, got {phi_p}")
    er = eigenvalue_ratios(eigenvalues, k_max)
    i1 = _argmax(er)
    if er.size > 1:
        rest = er.copy()
        rest[i1] = -np.inf
        i2 = _argmax(rest)
        er2 = float(er[i2])
    else:
        i2, er2 = i1, -np.inf
    k1, k2, er1 = i1 + 1, i2 + 1, float(er[i1])

    if er1 <= phi_p:
        variant, k_hat = "no_factors", 0
    elif er2 <= phi_p:
        variant = "single_level"
        k_hat = 0 if local_factors else k1
    else:
        variant, k_hat = "multi_level", min(k1, k2)
    return ModelSelection(variant, k_hat, k1, k2, er1, er2, float(phi_p), er)


def mer_select(Sigma_hat, k_max: int, phi_p: float | None = None, local_factors: bool = False) -> ModelSelection:
    """MER model selection and global factor count from a sample covariance.

    ``phi_p`` defaults to ``0.3 * log(p)``.
    """
    dec = sym_eigen(Sigma_hat)
    p = dec.eigenvalues.size
    if phi_p is None:
        phi_p = default_phi(p)
    return mer_from_eigenvalues(dec.eigenvalues, k_max, phi_p, local_factors=local_factors)


def er_local_select(Sigma_E_block, r_max: int) -> int:
    """Local factor count: the argmax of consecutive eigenvalue ratios of a block."""
    dec = sym_eigen(Sigma_E_block)
    if r_max + 1 > dec.eigenvalues.size:
        raise InvalidKMax(f"r_max={r_max} needs r_max + 1 <= {dec.eigenvalues.size}")
    return _argmax(eigenvalue_ratios(dec.eigenvalues, r_max)) + 1


def default_k_max(p: int, T: int, J: int, r_max: int = 10) -> int:
    """``min(10 + J * r_max, p - 1, T - 2)``; ``T - 2`` keeps ``d_{k_max+1}`` inside the rank."""
    return int(max(1, min(10 + J * r_max, p - 1, T - 2)))
