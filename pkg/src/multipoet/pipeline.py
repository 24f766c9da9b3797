"""One entry point for "estimate a covariance with method X", shared by the
simulation runner, the backtester and the CLI. Factor counts left as
``None`` are chosen from the data (MER for ``k``, ER for each ``r_j``)."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .errors import InvalidConfig
from .estimators import (
    CovEstimate,
    GroupStructure,
    ThresholdSpec,
    _make_estimate,
    default_tau,
    double_poet_cov,
    per_group_counts,
    poet2_cov,
    poet_cov,
    principal_truncation,
    sample_covariance,
)
from .selection import default_k_max, default_phi, er_local_select, mer_select

log = logging.getLogger(__name__)

METHODS = ("samcov", "poet", "poet2", "double_poet", "identity")


@dataclass(frozen=True)
class EstimatorConfig:
    """How to turn a returns window into a covariance estimate.

    ``k`` / ``r`` of ``None`` mean "choose from the data"; ``tau`` of
    ``None`` means :func:`~multipoet.estimators.default_tau` with constant
    ``tau_scale``. ``r_total`` only matters for POET2 and defaults to the
    sum of the (possibly estimated) local counts. ``pd_floor`` turns on the
    positive-definiteness guard of
    :func:`~multipoet.estimators.pd_guard_tau` (``None`` disables it).
    """

    method: str = "double_poet"
    k: int | None = None
    r: int | Sequence[int] | None = None
    r_total: int | None = None
    tau: float | None = None
    tau_scale: float = 0.5
    rule: str = "soft"
    sector_labels: tuple | None = None
    k_max: int | None = None
    r_max: int = 10
    phi_scale: float = 0.3
    repair: bool = False
    pd_floor: float | None = 0.1

    def __post_init__(self):
        if self.method not in METHODS:
            raise InvalidConfig(f"unknown method {self.method!r}; choose from {', '.join(METHODS)}")

    def with_(self, **kw) -> "EstimatorConfig":
        return replace(self, **kw)


@dataclass
class FitInfo:
    """What the pipeline decided along the way (for logs and reports)."""

    k: int = 0
    r: tuple = ()
    tau: float = 0.0
    selection: object = None
    notes: list = field(default_factory=list)


def choose_k(S: np.ndarray, T: int, cfg: EstimatorConfig, groups: GroupStructure | None, info: FitInfo) -> int:
    if cfg.k is not None:
        return int(cfg.k)
    p = S.shape[0]
    J = groups.J if groups is not None else 1
    k_max = cfg.k_max or default_k_max(p, T, J, cfg.r_max)
    k_max = min(k_max, p - 1, max(1, T - 2))
    sel = mer_select(S, k_max, default_phi(p, cfg.phi_scale), local_factors=groups is not None)
    info.selection = sel
    return sel.k_hat


def choose_r(S: np.ndarray, k: int, groups: GroupStructure, cfg: EstimatorConfig) -> np.ndarray:
    if cfg.r is not None:
        return per_group_counts(cfg.r, groups)
    _, S_E = principal_truncation(S, k)
    out = []
    for j in range(1, groups.J + 1):
        idx = groups.indices(j)
        r_max = min(cfg.r_max, idx.size - 2)
        out.append(er_local_select(S_E[np.ix_(idx, idx)], r_max) if r_max >= 1 else 0)
    return np.array(out, dtype=int)


def _tau(cfg: EstimatorConfig, p: int, T: int, groups: GroupStructure | None) -> float:
    if cfg.tau is not None:
        return float(cfg.tau)
    p_min = int(groups.group_sizes.min()) if groups is not None else None
    return default_tau(p, T, p_min, cfg.tau_scale)


def estimate_from_cov(
    S: np.ndarray, T: int, cfg: EstimatorConfig, groups: GroupStructure | None = None
) -> tuple[CovEstimate, FitInfo]:
    """Run the configured estimator on a sample covariance from ``T`` rows."""
    p = S.shape[0]
    info = FitInfo()
    if cfg.method == "identity":
        est = _make_estimate("identity", np.zeros((p, 0)), np.zeros(0), np.zeros((p, 0)), np.zeros(0),
                             np.eye(p), 0, (), 0.0)
        return est, info
    if cfg.method == "samcov":
        est = _make_estimate("samcov", np.zeros((p, 0)), np.zeros(0), np.zeros((p, 0)), np.zeros(0),
                             S, 0, (), 0.0)
        return est, info

    info.tau = _tau(cfg, p, T, groups)
    spec = ThresholdSpec(info.tau, cfg.rule, cfg.sector_labels)
    k = choose_k(S, T, cfg, groups if cfg.method != "poet" else None, info)
    info.k = k

    if cfg.method == "poet":
        est = poet_cov(S, k, spec, pd_floor=cfg.pd_floor)
    elif cfg.method == "poet2":
        if cfg.r_total is not None:
            r_total = int(cfg.r_total)
        elif groups is not None:
            rj = choose_r(S, k, groups, cfg)
            info.r = tuple(int(x) for x in rj)
            r_total = int(rj.sum())
        else:
            raise InvalidConfig("poet2 needs r_total or a group structure")
        r_total = min(r_total, p - k)
        est = poet2_cov(S, k, r_total, spec, pd_floor=cfg.pd_floor)
    else:
        if groups is None:
            raise InvalidConfig("double_poet needs a group structure")
        rj = choose_r(S, k, groups, cfg)
        info.r = tuple(int(x) for x in rj)
        est = double_poet_cov(S, k, groups, rj, spec, repair=cfg.repair, pd_floor=cfg.pd_floor)
    if est.tau != info.tau:
        info.notes.append(f"tau raised from {info.tau:.6g} to {est.tau:.6g} to keep the residual positive definite")
        info.tau = est.tau
    log.debug("%s: k=%d r=%s tau=%.4g", cfg.method, k, info.r, info.tau)
    return est, info


def estimate(values, cfg: EstimatorConfig, groups: GroupStructure | None = None):
    """Estimate from a ``T x p`` returns array or :class:`ReturnsPanel`."""
    S = sample_covariance(values)
    T = np.shape(getattr(values, "values", values))[0]
    return estimate_from_cov(S, T, cfg, groups)
