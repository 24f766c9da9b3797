"""Minimum-variance portfolios under a gross-exposure bound, and a rolling backtest.

The allocation problem is

    min_w  w' S w   subject to  1'w = 1,  ||w||_1 <= c.

When the unconstrained minimizer ``S^{-1} 1 / (1' S^{-1} 1)`` already has
gross exposure at most ``c`` it is the answer. Otherwise the weights are
split as ``w = x - y`` with ``x, y >= 0`` and the resulting smooth problem
over ``{1'x - 1'y = 1, 1'x + 1'y <= c}`` is solved by accelerated
projected gradient with adaptive restart; the projection onto that set is
computed exactly.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import InfeasibleConstraint, InsufficientData, InvalidInput, MultiPoetError, NotPositiveDefinite, SolverFailed
from .estimators import GroupStructure, ReturnsPanel, sample_covariance
from .linalg import as_symmetric
from .pipeline import EstimatorConfig, estimate_from_cov

log = logging.getLogger(__name__)

MAX_ITER = 100_000
KKT_TOL = 1e-10
PD_REPAIR_FLOOR = 1e-8


@dataclass(frozen=True)
class PortfolioSolution:
    """Optimal weights and solver diagnostics.

    ``l1_active`` says whether the gross-exposure bound binds at the
    solution; ``method`` is ``"closed_form"`` or ``"fista"``.
    """

    weights: np.ndarray
    objective: float
    gross_exposure: float
    c: float
    converged: bool
    iterations: int
    l1_active: bool
    method: str
    kkt_residual: float = 0.0


def _simplex(v: np.ndarray, s: float) -> tuple[np.ndarray, float]:
    """Euclidean projection of ``v`` onto ``{x >= 0, sum(x) = s}`` and its shift ``theta``."""
    if s <= 0:
        return np.zeros_like(v), float(v.max())
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - s
    ind = np.arange(1, v.size + 1)
    rho = np.flatnonzero(u - css / ind > 0)[-1]
    theta = css[rho] / (rho + 1)
    return np.maximum(v - theta, 0.0), float(theta)


def project_split(a: np.ndarray, b: np.ndarray, c: float) -> tuple[np.ndarray, np.ndarray]:
    """Project ``(a, b)`` onto ``{x, y >= 0, 1'x - 1'y = 1, 1'x + 1'y <= c}``.

    For a fixed short total ``t = 1'y`` the problem separates into two
    simplex projections with sums ``1 + t`` and ``t``. The squared distance
    is convex in ``t`` with derivative ``-2 (theta_a(1 + t) + theta_b(t))``,
    so the best ``t`` in ``[0, (c - 1) / 2]`` is found by bisection on
    that decreasing function.
    """
    t_max = max(0.0, (c - 1.0) / 2.0)

    def h(t):
        return _simplex(a, 1.0 + t)[1] + _simplex(b, t)[1]

    if t_max == 0.0 or h(0.0) <= 0.0:
        t = 0.0
    elif h(t_max) >= 0.0:
        t = t_max
    else:
        lo, hi = 0.0, t_max
        for _ in range(100):
            mid = 0.5 * (lo + hi)
            if h(mid) > 0.0:
                lo = mid
            else:
                hi = mid
            if hi - lo <= 1e-15 * max(1.0, t_max):
                break
        t = 0.5 * (lo + hi)
    return _simplex(a, 1.0 + t)[0], _simplex(b, t)[0]


def _prepare(Sigma, repair: bool) -> np.ndarray:
    S = as_symmetric(Sigma, "Sigma")
    w, V = np.linalg.eigh(S)
    p = S.shape[0]
    floor = PD_REPAIR_FLOOR * max(np.trace(S) / p, 0.0)
    if w[0] > max(floor, 1e-12 * max(1.0, abs(w[-1]))):
        return S
    if not repair:
        raise NotPositiveDefinite(f"covariance has minimum eigenvalue {w[0]:.3g}")
    if floor <= 0:
        raise NotPositiveDefinite("covariance has nonpositive trace; cannot repair")
    out = (V * np.maximum(w, floor)) @ V.T
    return (out + out.T) / 2.0


def _solution(S, w, c, converged, iterations, method, kkt=0.0) -> PortfolioSolution:
    gross = float(np.abs(w).sum())
    return PortfolioSolution(
        weights=w, objective=float(w @ S @ w), gross_exposure=gross, c=float(c), converged=converged,
        iterations=iterations, l1_active=bool(gross >= c - 1e-8), method=method, kkt_residual=float(kkt),
    )


def min_variance_weights(
    Sigma, c: float = math.inf, repair: bool = False, tol: float = KKT_TOL, max_iter: int = MAX_ITER
) -> PortfolioSolution:
    """Minimum-variance weights with gross exposure at most ``c``.

    Parameters
    ----------
    Sigma : array_like
        Positive definite covariance.
    c : float
        Gross-exposure bound, at least 1. ``inf`` gives the unconstrained
        minimum-variance portfolio.
    repair : bool
        Floor the eigenvalues of ``Sigma`` at ``1e-8 * trace / p`` instead
        of rejecting a matrix that is not positive definite.
    tol : float
        Stop when the projected-gradient step ``||z - P(z - grad / L)||``
        falls below ``tol``.

    Raises
    ------
    InfeasibleConstraint
        If ``c < 1``.
    NotPositiveDefinite
        If ``Sigma`` is not positive definite and ``repair`` is off.
    SolverFailed
        After ``max_iter`` iterations; ``exc.solution`` holds the best
        feasible iterate.
    """
    if not c >= 1.0:
        raise InfeasibleConstraint(f"gross exposure bound c={c} is below 1; no weights sum to 1")
    S = _prepare(Sigma, repair)
    p = S.shape[0]
    ones = np.ones(p)
    L_chol = np.linalg.cholesky(S)
    z = np.linalg.solve(L_chol.T, np.linalg.solve(L_chol, ones))
    w = z / z.sum()
    if np.abs(w).sum() <= c:
        return _solution(S, w, c, True, 0, "closed_form")

    lip = 4.0 * float(np.linalg.eigvalsh(S)[-1])
    # start from the closed form pulled back into the feasible set
    x, y = project_split(np.maximum(w, 0.0), np.maximum(-w, 0.0), c)
    xp, yp = x, y
    u, v = x, y
    theta = 1.0
    best = (np.inf, x - y)
    kkt = np.inf
    for it in range(1, max_iter + 1):
        g = 2.0 * S @ (u - v)
        xn, yn = project_split(u - g / lip, v + g / lip, c)
        wn = xn - yn
        obj = float(wn @ S @ wn)
        if obj < best[0]:
            best = (obj, wn)
        # gradient restart when momentum points uphill
        if np.dot(g, (xn - x) - (yn - y)) > 0:
            theta = 1.0
            u, v = xn, yn
        else:
            theta_n = 0.5 * (1.0 + math.sqrt(1.0 + 4.0 * theta * theta))
            beta = (theta - 1.0) / theta_n
            u, v = xn + beta * (xn - x), yn + beta * (yn - y)
            theta = theta_n
        x, y = xn, yn
        if it % 10 == 0 or it == max_iter:
            gx = 2.0 * S @ (x - y)
            px, py = project_split(x - gx / lip, y + gx / lip, c)
            kkt = math.sqrt(float(np.sum((px - x) ** 2) + np.sum((py - y) ** 2)))
            if kkt <= tol:
                return _solution(S, x - y, c, True, it, "fista", kkt)
    sol = _solution(S, best[1], c, False, max_iter, "fista", kkt)
    raise SolverFailed(f"no convergence in {max_iter} iterations (step norm {kkt:.3g})", solution=sol)


def realized_risk(weights, returns) -> float:
    """Root mean square of the portfolio returns ``returns @ weights``."""
    w = np.asarray(weights, dtype=float).ravel()
    R = np.atleast_2d(np.asarray(returns, dtype=float))
    if R.shape[1] != w.size:
        raise InvalidInput(f"{w.size} weights for returns with {R.shape[1]} columns")
    if R.shape[0] == 0:
        raise InvalidInput("no returns in the holding period")
    r = R @ w
    return float(np.sqrt(np.mean(r * r)))


@dataclass
class BacktestReport:
    """Out-of-sample risk of one estimator at one gross-exposure bound.

    ``overall_risk`` is the mean of ``period_risks``; ``rebalances`` holds
    the row index (or time label) at which each period starts.
    """

    method: str
    c: float
    period_risks: list = field(default_factory=list)
    rebalances: list = field(default_factory=list)
    k_used: list = field(default_factory=list)
    skipped: list = field(default_factory=list)

    @property
    def overall_risk(self) -> float:
        return float(np.mean(self.period_risks)) if self.period_risks else math.nan


def rebalance_schedule(panel: ReturnsPanel, window: int = 104, hold: int = 4,
                       calendar: bool | None = None) -> list[tuple[int, int]]:
    """Holding periods ``[start, stop)`` in row indices.

    With time labels (and ``calendar`` not ``False``) each period is a
    calendar month whose first row has at least ``window`` rows before it.
    Otherwise periods are consecutive blocks of ``hold`` rows starting at
    row ``window``; a trailing partial block is dropped.
    """
    if window < 2 or hold < 1:
        raise InvalidInput(f"need window >= 2 and hold >= 1, got {window}, {hold}")
    T = panel.T
    use_calendar = panel.time_labels is not None if calendar is None else calendar
    if use_calendar:
        if panel.time_labels is None:
            raise InvalidInput("calendar rebalancing needs time labels")
        try:
            months = np.array(panel.time_labels, dtype="datetime64[D]").astype("datetime64[M]")
        except ValueError as exc:
            raise InvalidInput(f"time labels are not ISO dates: {exc}")
        if np.any(np.diff(months.astype(int)) < 0):
            raise InvalidInput("time labels are not in increasing order")
        starts = np.flatnonzero(np.r_[True, months[1:] != months[:-1]])
        stops = np.r_[starts[1:], T]
        periods = [(int(a), int(b)) for a, b in zip(starts, stops) if a >= window]
    else:
        periods = [(t, t + hold) for t in range(window, T - hold + 1, hold)]
    if not periods:
        raise InsufficientData(f"panel of {T} rows leaves no holding period after a {window}-row window")
    return periods


def backtest(
    panel,
    cfg: EstimatorConfig,
    c_grid: Sequence[float] = (1.0, 1.5, 2.0, 2.5, 3.0, 3.5, 4.0),
    window: int = 104,
    hold: int = 4,
    groups: GroupStructure | None = None,
    repair: bool = True,
    calendar: bool | None = None,
) -> list[BacktestReport]:
    """Rolling out-of-sample minimum-variance backtest, one report per ``c``.

    At every rebalance the covariance is estimated from the previous
    ``window`` rows, weights are solved for each ``c`` and held over the
    period, and the period's :func:`realized_risk` is recorded. A failed
    estimate or solve skips the period (logged and listed in
    ``report.skipped``).
    """
    if not isinstance(panel, ReturnsPanel):
        panel = ReturnsPanel(panel)
    c_grid = [float(c) for c in c_grid]
    if not c_grid:
        raise InvalidInput("empty c grid")
    for c in c_grid:
        if not c >= 1.0:
            raise InfeasibleConstraint(f"gross exposure bound c={c} is below 1")
    if panel.T <= window:
        raise InsufficientData(f"panel has {panel.T} rows, the estimation window needs more than {window}")
    Y = panel.values
    reports = [BacktestReport(cfg.method, c) for c in c_grid]
    for start, stop in rebalance_schedule(panel, window, hold, calendar):
        tag = panel.time_labels[start] if panel.time_labels is not None else start
        Yw = Y[start - window : start]
        try:
            est, info = estimate_from_cov(sample_covariance(Yw), window, cfg, groups)
        except (MultiPoetError, np.linalg.LinAlgError) as exc:
            log.warning("period at %s skipped: %s", tag, exc)
            for rep in reports:
                rep.skipped.append((tag, f"{type(exc).__name__}: {exc}"))
            continue
        for rep in reports:
            try:
                sol = min_variance_weights(est.assembled, rep.c, repair=repair)
            except SolverFailed as exc:
                log.warning("period at %s, c=%g: %s; using best iterate", tag, rep.c, exc)
                sol = exc.solution
            except MultiPoetError as exc:
                log.warning("period at %s, c=%g skipped: %s", tag, rep.c, exc)
                rep.skipped.append((tag, f"{type(exc).__name__}: {exc}"))
                continue
            rep.period_risks.append(realized_risk(sol.weights, Y[start:stop]))
            rep.rebalances.append(tag)
            rep.k_used.append(est.k_used)
    return reports


def write_backtest_csv(path, reports: Sequence[BacktestReport]) -> None:
    """Per-period rows ``(c, method, k, period_index, realized_risk)`` then one summary row per report."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["c", "method", "k", "period_index", "rebalance", "realized_risk"])
        for rep in reports:
            for i, (k, tag, r) in enumerate(zip(rep.k_used, rep.rebalances, rep.period_risks)):
                w.writerow([format(rep.c, ".17g"), rep.method, k, i, tag, format(r, ".17g")])
        for rep in reports:
            w.writerow([format(rep.c, ".17g"), rep.method, "", "mean", len(rep.period_risks),
                        format(rep.overall_risk, ".17g")])
