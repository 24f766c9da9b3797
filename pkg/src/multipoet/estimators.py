"""Covariance estimators for global + local (national) latent factor models.

Four estimators share one code path: the sample covariance, POET (top-k
principal components plus a thresholded remainder), POET2 (POET with the
local factors counted as extra global ones) and Double-POET, which removes
the global principal components first and then runs a second principal
component step inside every group's diagonal block before thresholding
what is left.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import (
    InsufficientData,
    InvalidFactorCount,
    InvalidInput,
    InvalidResidualDiagonal,
    NotPositiveDefinite,
    UnknownGroup,
)
from .linalg import as_symmetric, sym_eigen

ZERO_TOL = 1e-10


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


# --------------------------------------------------------------------------
# data containers
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class ReturnsPanel:
    """A ``T x p`` matrix of observations with asset (and optional time) labels."""

    values: np.ndarray
    asset_ids: tuple = ()
    time_labels: tuple | None = None

    def __post_init__(self):
        Y = np.array(self.values, dtype=float)
        if Y.ndim != 2:
            raise InvalidInput(f"panel must be 2-D, got shape {Y.shape}")
        if not np.all(np.isfinite(Y)):
            raise InvalidInput("panel has non-finite entries")
        T, p = Y.shape
        if p < 1:
            raise InvalidInput("panel needs at least one asset")
        if T < 2:
            raise InsufficientData(f"need at least 2 observations, got {T}")
        Y.setflags(write=False)
        object.__setattr__(self, "values", Y)
        ids = tuple(self.asset_ids) if len(self.asset_ids) else tuple(f"a{i}" for i in range(p))
        if len(ids) != p:
            raise InvalidInput(f"{len(ids)} asset ids for {p} columns")
        object.__setattr__(self, "asset_ids", ids)
        if self.time_labels is not None:
            labels = tuple(self.time_labels)
            if len(labels) != T:
                raise InvalidInput(f"{len(labels)} time labels for {T} rows")
            object.__setattr__(self, "time_labels", labels)

    @property
    def T(self) -> int:
        return self.values.shape[0]

    @property
    def p(self) -> int:
        return self.values.shape[1]


def panel_values(panel) -> np.ndarray:
    """Return the ``T x p`` array behind a :class:`ReturnsPanel` or array-like."""
    if isinstance(panel, ReturnsPanel):
        return panel.values
    return ReturnsPanel(panel).values


@dataclass(frozen=True)
class GroupStructure:
    """Group membership ``g_i`` in ``1..J`` for each asset, in user order.

    Groups need not occupy contiguous columns; :attr:`order` is the stable
    permutation that sorts assets into contiguous blocks and
    :attr:`inverse_order` undoes it.
    """

    membership: np.ndarray
    names: tuple = ()

    def __post_init__(self):
        g = np.asarray(self.membership)
        if g.ndim != 1 or g.size == 0:
            raise InvalidInput("membership must be a non-empty vector")
        if not np.issubdtype(g.dtype, np.integer):
            if not np.all(np.equal(np.mod(g, 1), 0)):
                raise InvalidInput("membership must hold integer group ids; use from_labels")
        g = g.astype(int)
        J = int(g.max())
        if g.min() < 1:
            raise InvalidInput("group ids start at 1")
        sizes = np.bincount(g, minlength=J + 1)[1:]
        if np.any(sizes == 0):
            raise InvalidInput(f"empty groups: {list(np.flatnonzero(sizes == 0) + 1)}")
        g.setflags(write=False)
        object.__setattr__(self, "membership", g)
        names = tuple(self.names) if len(self.names) else tuple(range(1, J + 1))
        if len(names) != J:
            raise InvalidInput(f"{len(names)} group names for {J} groups")
        object.__setattr__(self, "names", names)

    @classmethod
    def from_labels(cls, labels: Sequence) -> "GroupStructure":
        """Build from arbitrary hashable labels; ids follow sorted label order."""
        labels = list(labels)
        uniq = sorted(set(labels))
        lookup = {lab: i + 1 for i, lab in enumerate(uniq)}
        return cls(np.array([lookup[lab] for lab in labels]), tuple(uniq))

    @classmethod
    def equal(cls, p: int, J: int) -> "GroupStructure":
        """``J`` contiguous groups of ``p // J`` assets each."""
        if J < 1 or p % J:
            raise InvalidInput(f"p={p} is not divisible into J={J} equal groups")
        return cls(np.repeat(np.arange(1, J + 1), p // J))

    @property
    def p(self) -> int:
        return self.membership.size

    @property
    def J(self) -> int:
        return len(self.names)

    @property
    def group_sizes(self) -> np.ndarray:
        return np.bincount(self.membership, minlength=self.J + 1)[1:]

    @property
    def order(self) -> np.ndarray:
        return np.argsort(self.membership, kind="stable")

    @property
    def inverse_order(self) -> np.ndarray:
        return np.argsort(self.order, kind="stable")

    def indices(self, j: int) -> np.ndarray:
        if not 1 <= j <= self.J:
            raise UnknownGroup(f"group {j} not in 1..{self.J}")
        return np.flatnonzero(self.membership == j)

    def permuted(self, perm: np.ndarray) -> "GroupStructure":
        """Membership after reordering assets as ``new[i] = old[perm[i]]``."""
        return GroupStructure(self.membership[perm], self.names)


@dataclass(frozen=True)
class ThresholdSpec:
    """Threshold constant and rule for the residual covariance.

    ``rule`` is ``"soft"``, ``"hard"`` or ``"sector_block"``; the last keeps
    an entry only when both assets share a sector label and ignores ``tau``.
    """

    tau: float = 0.0
    rule: str = "soft"
    sector_labels: tuple | None = None

    def __post_init__(self):
        if not (self.tau >= 0 and math.isfinite(self.tau)):
            raise InvalidInput(f"tau must be a finite nonnegative number, got {self.tau}")
        if self.rule == "sector":
            object.__setattr__(self, "rule", "sector_block")
        if self.rule not in ("soft", "hard", "sector_block"):
            raise InvalidInput(f"unknown threshold rule {self.rule!r}")
        if self.rule == "sector_block" and self.sector_labels is None:
            raise InvalidInput("sector_block thresholding needs sector_labels")
        if self.sector_labels is not None:
            object.__setattr__(self, "sector_labels", tuple(self.sector_labels))


@dataclass(frozen=True)
class FactorEstimate:
    """Least-squares factor fit ``Y = G B' + F Lambda' + U``."""

    B_hat: np.ndarray
    G_hat: np.ndarray
    Lambda_hat: np.ndarray
    F_hat: np.ndarray
    residuals: np.ndarray


@dataclass(frozen=True)
class CovEstimate:
    """Structured covariance estimate.

    ``assembled`` is built as ``global_part + local_part + residual_part``.
    The low-rank parts are also kept in factored form,
    ``global_part = Ug diag(cg) Ug'`` and ``local_part = Ul diag(cl) Ul'``,
    which is what :func:`precision_matrix` works from.
    """

    global_part: np.ndarray
    local_part: np.ndarray
    residual_part: np.ndarray
    assembled: np.ndarray
    method: str
    k_used: int
    r_used: tuple = ()
    tau: float = 0.0
    global_vectors: np.ndarray = field(default=None, repr=False)
    global_values: np.ndarray = field(default=None, repr=False)
    local_vectors: np.ndarray = field(default=None, repr=False)
    local_values: np.ndarray = field(default=None, repr=False)

    @property
    def p(self) -> int:
        return self.assembled.shape[0]


def _low_rank(U: np.ndarray, c: np.ndarray) -> np.ndarray:
    M = (U * c) @ U.T
    return (M + M.T) / 2.0


def _make_estimate(method, Ug, cg, Ul, cl, residual, k_used, r_used, tau) -> CovEstimate:
    p = residual.shape[0]
    Ug = np.asarray(Ug, dtype=float).reshape(p, -1)
    Ul = np.asarray(Ul, dtype=float).reshape(p, -1)
    global_part = _low_rank(Ug, cg)
    local_part = _low_rank(Ul, cl)
    assembled = global_part + local_part + residual
    return CovEstimate(
        global_part=_frozen(global_part),
        local_part=_frozen(local_part),
        residual_part=_frozen(residual),
        assembled=_frozen(assembled),
        method=method,
        k_used=int(k_used),
        r_used=tuple(int(x) for x in r_used),
        tau=float(tau),
        global_vectors=_frozen(Ug),
        global_values=_frozen(cg),
        local_vectors=_frozen(Ul),
        local_values=_frozen(cl),
    )


# --------------------------------------------------------------------------
# building blocks
# --------------------------------------------------------------------------


def sample_covariance(panel) -> np.ndarray:
    """Demeaned sample covariance with divisor ``T``."""
    Y = panel_values(panel)
    Yc = Y - Y.mean(axis=0)
    S = Yc.T @ Yc / Y.shape[0]
    return (S + S.T) / 2.0


def _truncate(S: np.ndarray, k: int):
    p = S.shape[0]
    if not 0 <= k <= p:
        raise InvalidFactorCount(f"k={k} outside 0..{p}")
    dec = sym_eigen(S)
    V, vals = dec.eigenvectors[:, :k], dec.eigenvalues[:k]
    low = _low_rank(V, vals)
    return V, vals, low, S - low


def principal_truncation(Sigma_hat, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Split ``Sigma_hat`` into its top-``k`` spectral part and the remainder."""
    S = as_symmetric(Sigma_hat, "Sigma_hat")
    _, _, low, rest = _truncate(S, k)
    return low, rest


def adaptive_threshold(residual, spec: ThresholdSpec) -> np.ndarray:
    """Entry-adaptive thresholding of a residual covariance.

    Off-diagonal entry ``(i, j)`` is compared with
    ``tau * sqrt(s_ii * s_jj)``; the diagonal is never touched. Rows whose
    entries are all numerically zero (an asset fully explained by the
    factors) pass through unchanged.

    Raises
    ------
    InvalidResidualDiagonal
        If a diagonal entry is not positive while its row carries signal.
    """
    R = as_symmetric(residual, "residual")
    p = R.shape[0]
    d = np.diag(R).copy()
    dead = np.all(np.abs(R) <= ZERO_TOL, axis=1)
    bad = (d <= 0) & ~dead
    if np.any(bad):
        i = int(np.flatnonzero(bad)[0])
        raise InvalidResidualDiagonal(f"residual variance of asset {i} is {d[i]:.3g}")

    if spec.rule == "sector_block":
        labels = np.asarray(spec.sector_labels, dtype=object)
        if labels.size != p:
            raise InvalidInput(f"{labels.size} sector labels for {p} assets")
        _, codes = np.unique(labels.astype(str), return_inverse=True)
        out = np.where(codes[:, None] == codes[None, :], R, 0.0)
    else:
        scale = np.sqrt(np.clip(d, 0.0, None))
        thr = spec.tau * np.outer(scale, scale)
        if spec.rule == "soft":
            out = np.sign(R) * np.maximum(np.abs(R) - thr, 0.0)
        else:
            out = np.where(np.abs(R) >= thr, R, 0.0)
    np.fill_diagonal(out, d)
    out[dead, :] = R[dead, :]
    out[:, dead] = R[:, dead]
    return (out + out.T) / 2.0


def default_tau(p: int, T: int, min_group_size: int | None = None, C: float = 0.5) -> float:
    """Rate-based threshold constant ``C * (sqrt(log p / T) + 1 / sqrt(p_min))``.

    ``p_min`` is the smallest group size (``p`` when there are no groups).
    """
    p_min = p if min_group_size is None else min_group_size
    return float(C * (math.sqrt(math.log(max(p, 2)) / T) + 1.0 / math.sqrt(p_min)))


def pd_guard_tau(residual, spec: ThresholdSpec, floor: float = 0.1, iterations: int = 20) -> float:
    """Smallest threshold at or above ``spec.tau`` that keeps the result positive definite.

    "Positive definite" here means a minimum eigenvalue of at least
    ``floor`` times the smallest diagonal entry, which a large enough
    threshold always reaches (the output is then diagonal). The search is a
    bisection between ``spec.tau`` and that diagonal-making value; for the
    sector rule ``spec.tau`` is returned unchanged.
    """
    if spec.rule == "sector_block":
        return spec.tau
    if not 0.0 < floor <= 1.0:
        raise InvalidInput(f"floor must lie in (0, 1], got {floor}")
    R = as_symmetric(residual, "residual")
    d = np.diag(R)
    live = ~np.all(np.abs(R) <= ZERO_TOL, axis=1)
    if not np.any(live):
        return spec.tau
    target = floor * float(d[live].min())

    def ok(t: float) -> bool:
        out = adaptive_threshold(R, ThresholdSpec(t, spec.rule))
        return np.linalg.eigvalsh(out[np.ix_(live, live)])[0] >= target

    if ok(spec.tau):
        return spec.tau
    scale = np.sqrt(np.clip(d, ZERO_TOL, None))
    ratio = np.abs(R) / np.outer(scale, scale)
    np.fill_diagonal(ratio, 0.0)
    lo = spec.tau
    hi = max(lo, float(ratio[np.ix_(live, live)].max())) * (1 + 1e-9) + 1e-12
    for _ in range(iterations):
        mid = 0.5 * (lo + hi)
        if ok(mid):
            hi = mid
        else:
            lo = mid
    return hi


def _threshold(S_u: np.ndarray, spec: ThresholdSpec, pd_floor: float | None) -> tuple[np.ndarray, float]:
    if pd_floor is not None:
        spec = ThresholdSpec(pd_guard_tau(S_u, spec, pd_floor), spec.rule, spec.sector_labels)
    return adaptive_threshold(S_u, spec), spec.tau


def per_group_counts(r, groups: GroupStructure) -> np.ndarray:
    """Broadcast a scalar or per-group local factor count to a length-J array."""
    arr = np.atleast_1d(np.asarray(r, dtype=int))
    if arr.size == 1:
        arr = np.full(groups.J, int(arr[0]))
    if arr.size != groups.J:
        raise InvalidFactorCount(f"{arr.size} local factor counts for {groups.J} groups")
    if np.any(arr < 0):
        raise InvalidFactorCount("local factor counts must be nonnegative")
    return arr


def _check_groups(groups: GroupStructure, p: int):
    if groups.p != p:
        raise InvalidInput(f"group structure covers {groups.p} assets, panel has {p}")


def _top_pca_rows(Y: np.ndarray, k: int):
    """Top-k principal directions of ``Y Y' / T`` scaled to ``G' G / T = I``."""
    T = Y.shape[0]
    dec = sym_eigen(Y @ Y.T / T)
    G = np.sqrt(T) * dec.eigenvectors[:, :k]
    B = Y.T @ G / T
    return G, B


def fit_global_factors(panel, k: int):
    """Least-squares global factors ``(G_hat, B_hat, E_hat)`` of the demeaned panel.

    ``G_hat / sqrt(T)`` holds the top-``k`` eigenvectors of ``Y Y' / T``,
    ``B_hat = Y' G_hat / T`` and ``E_hat = Y - G_hat B_hat'``.
    """
    Y = panel_values(panel)
    T, p = Y.shape
    if not 0 <= k <= min(T, p):
        raise InvalidFactorCount(f"k={k} outside 0..min(T, p)={min(T, p)}")
    Yc = Y - Y.mean(axis=0)
    G, B = _top_pca_rows(Yc, k)
    return G, B, Yc - G @ B.T


def fit_local_factors(E_hat, groups: GroupStructure, r):
    """Per-group least-squares local factors on the global residual ``E_hat``.

    Returns ``(F_hat, Lambda_hat, U_hat)``; ``Lambda_hat`` is ``p x sum(r)``
    and block diagonal with the columns of group ``j`` following those of
    groups ``1..j-1``.
    """
    E = np.asarray(E_hat, dtype=float)
    T, p = E.shape
    _check_groups(groups, p)
    rj = per_group_counts(r, groups)
    F = np.zeros((T, rj.sum()))
    Lam = np.zeros((p, rj.sum()))
    U = E.copy()
    col = 0
    for j in range(1, groups.J + 1):
        idx = groups.indices(j)
        r_j = int(rj[j - 1])
        if r_j > min(T, idx.size):
            raise InvalidFactorCount(f"r_{j}={r_j} exceeds min(T, p_{j})={min(T, idx.size)}")
        if r_j == 0:
            continue
        Ej = E[:, idx]
        Fj, Lj = _top_pca_rows(Ej, r_j)
        F[:, col : col + r_j] = Fj
        Lam[idx, col : col + r_j] = Lj
        U[:, idx] = Ej - Fj @ Lj.T
        col += r_j
    return F, Lam, U


def fit_factors(panel, k: int, groups: GroupStructure, r) -> FactorEstimate:
    """Both least-squares stages in one call."""
    G, B, E = fit_global_factors(panel, k)
    F, Lam, U = fit_local_factors(E, groups, r)
    return FactorEstimate(B_hat=B, G_hat=G, Lambda_hat=Lam, F_hat=F, residuals=U)


# --------------------------------------------------------------------------
# estimators
# --------------------------------------------------------------------------


def _repair_residual(R: np.ndarray) -> np.ndarray:
    w, V = np.linalg.eigh(R)
    floor = 1e-6 * np.trace(R) / R.shape[0]
    if w[0] >= floor:
        return R
    out = (V * np.maximum(w, floor)) @ V.T
    return (out + out.T) / 2.0


def double_poet_cov(
    S, k: int, groups: GroupStructure, r, spec: ThresholdSpec, repair: bool = False,
    pd_floor: float | None = None,
) -> CovEstimate:
    """Double-POET from a precomputed sample covariance ``S``.

    With ``pd_floor`` set, the threshold is raised by :func:`pd_guard_tau`
    when ``spec.tau`` leaves the residual indefinite; ``tau`` on the result
    records the value actually used.
    """
    S = as_symmetric(S, "S")
    p = S.shape[0]
    _check_groups(groups, p)
    rj = per_group_counts(r, groups)
    sizes = groups.group_sizes
    too_big = np.flatnonzero(sizes < rj + 1)
    if too_big.size and np.any(rj[too_big] > 0):
        j = int(too_big[0]) + 1
        raise InvalidFactorCount(f"group {j} has {sizes[j - 1]} assets, needs more than r_{j}={rj[j - 1]}")

    V, vals, _, S_E = _truncate(S, k)

    Ul = np.zeros((p, rj.sum()))
    cl = np.zeros(rj.sum())
    col = 0
    for j in range(1, groups.J + 1):
        r_j = int(rj[j - 1])
        if r_j == 0:
            continue
        idx = groups.indices(j)
        dec = sym_eigen(S_E[np.ix_(idx, idx)])
        Ul[idx, col : col + r_j] = dec.eigenvectors[:, :r_j]
        cl[col : col + r_j] = dec.eigenvalues[:r_j]
        col += r_j

    S_u = S_E - _low_rank(Ul, cl)
    residual, tau = _threshold(S_u, spec, pd_floor)
    if repair:
        residual = _repair_residual(residual)
    return _make_estimate("double_poet", V, vals, Ul, cl, residual, k, rj, tau)


def double_poet(panel, k: int, groups: GroupStructure, r, spec: ThresholdSpec, repair: bool = False) -> CovEstimate:
    """Double-POET estimate.

    1. remove the top-``k`` principal components of the sample covariance;
    2. in every group's diagonal block of the remainder, remove the top
       ``r_j`` principal components (off-diagonal blocks are left as is);
    3. threshold what is left with ``spec``;
    4. add the three parts back together.

    ``r`` is a single count for every group or one count per group.
    ``repair=True`` floors the thresholded residual's eigenvalues at
    ``1e-6 * trace / p`` when thresholding broke positive definiteness.
    """
    return double_poet_cov(sample_covariance(panel), k, groups, r, spec, repair=repair)


def poet_cov(S, k: int, spec: ThresholdSpec, method: str = "poet", pd_floor: float | None = None) -> CovEstimate:
    S = as_symmetric(S, "S")
    V, vals, _, S_E = _truncate(S, k)
    residual, tau = _threshold(S_E, spec, pd_floor)
    p = S.shape[0]
    return _make_estimate(method, V, vals, np.zeros((p, 0)), np.zeros(0), residual, k, (), tau)


def poet(panel, k: int, spec: ThresholdSpec) -> CovEstimate:
    """Single-level POET: top-``k`` principal components plus the thresholded remainder."""
    return poet_cov(sample_covariance(panel), k, spec)


def poet2_cov(S, k: int, r_total: int, spec: ThresholdSpec, pd_floor: float | None = None) -> CovEstimate:
    S = np.asarray(S, dtype=float)
    if k + r_total > S.shape[0]:
        raise InvalidFactorCount(f"k + r = {k + r_total} exceeds p = {S.shape[0]}")
    return poet_cov(S, k + r_total, spec, method="poet2", pd_floor=pd_floor)


def poet2(panel, k: int, r_total: int, spec: ThresholdSpec) -> CovEstimate:
    """POET with ``k + r_total`` principal components."""
    return poet2_cov(sample_covariance(panel), k, r_total, spec)


def samcov_estimate(panel) -> CovEstimate:
    """The sample covariance wrapped as a :class:`CovEstimate` (all residual)."""
    S = sample_covariance(panel)
    p = S.shape[0]
    return _make_estimate("samcov", np.zeros((p, 0)), np.zeros(0), np.zeros((p, 0)), np.zeros(0), S, 0, (), 0.0)


def _smw(A_inv: np.ndarray, U: np.ndarray, c: np.ndarray) -> np.ndarray:
    # (A + U C U')^{-1} = A^{-1} - A^{-1} U C (I + U' A^{-1} U C)^{-1} U' A^{-1}; C may be singular
    if U.shape[1] == 0:
        return A_inv
    AU = A_inv @ U
    core = np.eye(U.shape[1]) + (U.T @ AU) * c
    X = np.linalg.solve(core, AU.T)
    out = A_inv - (AU * c) @ X
    return (out + out.T) / 2.0


def precision_matrix(est: CovEstimate) -> np.ndarray:
    """Inverse of ``est.assembled`` through two Woodbury updates.

    The residual part is inverted directly, the local low-rank blocks are
    folded in next, then the global low-rank part.

    Raises
    ------
    NotPositiveDefinite
        If the residual part has an eigenvalue at or below ``1e-10``.
    """
    R = np.asarray(est.residual_part)
    w, V = np.linalg.eigh(R)
    if w[0] <= 1e-10:
        raise NotPositiveDefinite(
            f"residual part has minimum eigenvalue {w[0]:.3g}; raise tau or enable repair"
        )
    inv = (V / w) @ V.T
    inv = (inv + inv.T) / 2.0
    inv = _smw(inv, np.asarray(est.local_vectors), np.asarray(est.local_values))
    return _smw(inv, np.asarray(est.global_vectors), np.asarray(est.global_values))


def extract_local_block(est: CovEstimate, groups: GroupStructure, j: int) -> CovEstimate:
    """The ``j``-th diagonal block of ``est`` as a standalone structured estimate."""
    _check_groups(groups, est.p)
    idx = groups.indices(j)
    ix = np.ix_(idx, idx)
    Ul = np.asarray(est.local_vectors)[idx]
    keep = np.flatnonzero(np.any(Ul != 0.0, axis=0))
    r_used = (est.r_used[j - 1],) if len(est.r_used) == groups.J else ()
    return CovEstimate(
        global_part=_frozen(est.global_part[ix]),
        local_part=_frozen(est.local_part[ix]),
        residual_part=_frozen(est.residual_part[ix]),
        assembled=_frozen(est.assembled[ix]),
        method=est.method,
        k_used=est.k_used,
        r_used=r_used,
        tau=est.tau,
        global_vectors=_frozen(np.asarray(est.global_vectors)[idx]),
        global_values=est.global_values,
        local_vectors=_frozen(Ul[:, keep]),
        local_values=_frozen(np.asarray(est.local_values)[keep]),
    )


def embed_block(block: np.ndarray, groups: GroupStructure, j: int, out: np.ndarray) -> np.ndarray:
    """Write a ``p_j x p_j`` block back into the ``p x p`` matrix ``out`` in place."""
    idx = groups.indices(j)
    out[np.ix_(idx, idx)] = block
    return out
