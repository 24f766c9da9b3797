"""Data-generating process for the global + local factor Monte Carlo study.

Random streams: every draw goes through ``numpy.random.Philox`` seeded by a
``SeedSequence``. :func:`stream` derives child streams from a master seed
and a tuple of integer keys (grid index, replication, purpose), so any cell
of an experiment can be regenerated on its own.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import GenerationFailed, InvalidConfig
from .estimators import GroupStructure, ReturnsPanel

# stream purposes
MODEL, PANEL, PERTURB, CLUSTER = 0, 1, 2, 3


def stream(seed: int, *keys: int) -> np.random.Generator:
    """Counter-based generator for ``(seed, *keys)``."""
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in keys))
    return np.random.Generator(np.random.Philox(ss))


def _rng(seed_or_rng) -> np.random.Generator:
    if isinstance(seed_or_rng, np.random.Generator):
        return seed_or_rng
    return stream(seed_or_rng)


@dataclass(frozen=True)
class DGPParams:
    p: int
    T: int
    J: int
    k: int
    r_j: int
    m: float
    seed: int
    B: np.ndarray
    mu_B: np.ndarray
    Lambda: np.ndarray
    mu_lambda: np.ndarray
    Sigma_u: np.ndarray
    Sigma: np.ndarray

    @property
    def groups(self) -> GroupStructure:
        return GroupStructure.equal(self.p, self.J)

    @property
    def r_total(self) -> int:
        return self.J * self.r_j


def sparse_error_cov(p: int, m: float = 0.3, seed=0, max_attempts: int = 1000) -> np.ndarray:
    """Sparse idiosyncratic covariance ``D + s s' - diag(s^2)``.

    ``D = diag(d_i^2)`` with ``d_i ~ Gamma(shape=100, rate=100)`` and each
    ``s_i`` drawn from ``N(0, 1)`` with probability ``m / (sqrt(p) log p)``,
    zero otherwise. Draws repeat until the matrix is positive definite.
    """
    if p < 2 or not m > 0:
        raise InvalidConfig(f"need p >= 2 and m > 0, got p={p}, m={m}")
    rng = _rng(seed)
    prob = min(1.0, m / (math.sqrt(p) * math.log(p)))
    for _ in range(max_attempts):
        d = rng.gamma(shape=100.0, scale=1.0 / 100.0, size=p)
        s = np.where(rng.random(p) < prob, rng.standard_normal(p), 0.0)
        Su = np.diag(d**2) + np.outer(s, s) - np.diag(s**2)
        if np.linalg.eigvalsh(Su)[0] > 0:
            return Su
    raise GenerationFailed(f"no positive definite draw in {max_attempts} attempts")


def generate_model(p: int, T: int, J: int, k: int, r_j: int, m: float = 0.3, seed: int = 0) -> DGPParams:
    """Draw loadings and the idiosyncratic covariance for one model.

    Global loadings are rows of ``N(mu_B, I_k)`` with ``mu_B ~ U(-0.5, 0.5)^k``;
    group ``j``'s local loadings are rows of ``N(mu_j, I_r)`` with
    ``mu_j ~ U(-0.3, 0.3)^r``. Groups are contiguous with ``p / J`` assets.
    """
    if J < 1 or p % J or k < 0 or r_j < 0 or T < 2:
        raise InvalidConfig(f"invalid grid point p={p}, J={J}, k={k}, r_j={r_j}, T={T}")
    pj = p // J
    if r_j >= pj:
        raise InvalidConfig(f"r_j={r_j} needs groups larger than {pj}")
    rng = _rng(seed) if isinstance(seed, np.random.Generator) else stream(seed, MODEL)
    mu_B = rng.uniform(-0.5, 0.5, size=k)
    B = mu_B + rng.standard_normal((p, k))
    mu_lambda = rng.uniform(-0.3, 0.3, size=(J, r_j))
    Lambda = np.zeros((p, J * r_j))
    for j in range(J):
        rows = slice(j * pj, (j + 1) * pj)
        cols = slice(j * r_j, (j + 1) * r_j)
        Lambda[rows, cols] = mu_lambda[j] + rng.standard_normal((pj, r_j))
    Sigma_u = sparse_error_cov(p, m, rng)
    Sigma = B @ B.T + Lambda @ Lambda.T + Sigma_u
    Sigma = (Sigma + Sigma.T) / 2.0
    return DGPParams(p, T, J, k, r_j, m, seed if isinstance(seed, int) else -1,
                     B, mu_B, Lambda, mu_lambda, Sigma_u, Sigma)


def simulate_panel(dgp: DGPParams, seed=0, T: int | None = None) -> ReturnsPanel:
    """Draw ``Y = G B' + F Lambda' + U`` with standard normal factors and ``U ~ N(0, Sigma_u)``."""
    rng = _rng(seed)
    T = dgp.T if T is None else T
    G = rng.standard_normal((T, dgp.k))
    F = rng.standard_normal((T, dgp.Lambda.shape[1]))
    L = np.linalg.cholesky(dgp.Sigma_u)
    U = rng.standard_normal((T, dgp.p)) @ L.T
    Y = G @ dgp.B.T + F @ dgp.Lambda.T + U
    return ReturnsPanel(Y)


def perturb_membership(groups: GroupStructure, rate: float, seed=0) -> GroupStructure:
    """Move ``ceil(rate * p)`` randomly chosen assets to a random wrong group."""
    if not 0.0 <= rate <= 1.0:
        raise InvalidConfig(f"misclassification rate {rate} outside [0, 1]")
    p, J = groups.p, groups.J
    n_move = math.ceil(round(rate * p, 9))
    if n_move == 0:
        return groups
    if J < 2:
        raise InvalidConfig("cannot misassign assets with a single group")
    rng = _rng(seed)
    g = groups.membership.copy()
    moved = rng.choice(p, size=n_move, replace=False)
    shift = rng.integers(1, J, size=n_move)
    g[moved] = (g[moved] - 1 + shift) % J + 1
    # a move may empty a group; the membership stays usable only if every group survives
    if np.bincount(g, minlength=J + 1)[1:].min() == 0:
        raise InvalidConfig(f"rate {rate} empties a group")
    return GroupStructure(g, groups.names)
