"""Monte Carlo replications: estimation error of each method over a grid.

Every ``(grid point, replication)`` cell draws its own model and panel from
streams keyed by ``(seed, grid index, replication, purpose)``, so cells can
run in any order, on any number of threads, or be re-run alone, and the
report does not change.
"""

from __future__ import annotations

import csv
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .clustering import rsc_cluster
from .dgp import CLUSTER, MODEL, PANEL, PERTURB, DGPParams, generate_model, perturb_membership, simulate_panel, stream
from .errors import InvalidConfig, MultiPoetError, NotPositiveDefinite
from .estimators import CovEstimate, GroupStructure, extract_local_block, precision_matrix, principal_truncation, sample_covariance
from .linalg import inverse_sqrt, relative_frobenius
from .pipeline import EstimatorConfig, estimate_from_cov
from .selection import default_phi, mer_select

log = logging.getLogger(__name__)

NORMS = ("rel_frobenius", "max", "inverse_operator")
FULL_METHODS = ("samcov", "poet", "poet2", "double_poet", "double_poet_rsc", "double_poet_mix")
BLOCK_METHODS = ("samcov", "poet", "double_poet")
INV_TOL = 1e-10


@dataclass(frozen=True)
class GridPoint:
    """One model setting; ``rate`` is the membership misclassification used by ``double_poet_mix``."""

    p: int
    T: int
    J: int
    k: int = 3
    r_j: int = 2
    m: float = 0.3
    rate: float = 0.0

    def label(self) -> dict:
        return {"p": self.p, "T": self.T, "J": self.J, "k": self.k, "r_j": self.r_j, "m": self.m, "rate": self.rate}


@dataclass(frozen=True)
class SimulationConfig:
    """What to replicate.

    ``factor_counts`` is ``"auto"`` (MER for ``k`` with ``k_max = 10 + r``,
    ER for each ``r_j`` with ``r_max``) or ``"oracle"`` (true counts).
    ``target="block"`` scores the ``block_group`` diagonal block only:
    ``double_poet`` is the extracted block of the full estimate, while
    ``poet`` and ``samcov`` see that group's columns alone, POET with
    ``k + r_j`` components.
    """

    grid: tuple
    methods: tuple = ("samcov", "poet", "poet2", "double_poet")
    reps: int = 50
    seed: int = 0
    factor_counts: str = "auto"
    target: str = "full"
    block_group: int = 1
    norms: tuple = NORMS
    tau_scale: float = 0.5
    rule: str = "soft"
    pd_floor: float | None = 0.1
    phi_scale: float = 0.3
    r_max: int = 10
    workers: int | None = None

    def __post_init__(self):
        grid = tuple(self.grid)
        if not grid:
            raise InvalidConfig("empty grid")
        object.__setattr__(self, "grid", grid)
        object.__setattr__(self, "methods", tuple(self.methods))
        object.__setattr__(self, "norms", tuple(self.norms))
        allowed = FULL_METHODS if self.target == "full" else BLOCK_METHODS
        if self.target not in ("full", "block"):
            raise InvalidConfig(f"target must be 'full' or 'block', got {self.target!r}")
        bad = [m for m in self.methods if m not in allowed]
        if bad or not self.methods:
            raise InvalidConfig(f"methods {bad} not available for target {self.target!r}; choose from {allowed}")
        bad = [n for n in self.norms if n not in NORMS]
        if bad or not self.norms:
            raise InvalidConfig(f"unknown norms {bad}; choose from {NORMS}")
        if self.factor_counts not in ("auto", "oracle"):
            raise InvalidConfig(f"factor_counts must be 'auto' or 'oracle', got {self.factor_counts!r}")
        if self.reps < 1:
            raise InvalidConfig(f"reps must be at least 1, got {self.reps}")
        for g in grid:
            if g.J < 1 or g.p % g.J or g.r_j >= g.p // g.J:
                raise InvalidConfig(f"invalid grid point {g}")
            if not 0.0 <= g.rate <= 1.0:
                raise InvalidConfig(f"rate {g.rate} outside [0, 1]")
            if self.target == "block" and not 1 <= self.block_group <= g.J:
                raise InvalidConfig(f"block_group {self.block_group} outside 1..{g.J}")


@dataclass
class ReplicationReport:
    """Per-replication errors and their summaries.

    ``raw[(grid_index, method, norm)]`` holds one value per replication
    (NaN where the estimate failed or has no inverse).
    """

    config: SimulationConfig
    raw: dict
    failures: list = field(default_factory=list)

    def values(self, grid_index: int, method: str, norm: str = "rel_frobenius") -> np.ndarray:
        return self.raw[(grid_index, method, norm)]

    def summary(self) -> list[dict]:
        rows = []
        for gi, g in enumerate(self.config.grid):
            for method in self.config.methods:
                for norm in self.config.norms:
                    v = self.raw[(gi, method, norm)]
                    ok = v[np.isfinite(v)]
                    n = ok.size
                    mean = float(ok.mean()) if n else math.nan
                    se = float(ok.std(ddof=1) / math.sqrt(n)) if n > 1 else math.nan
                    rows.append({**g.label(), "method": method, "norm": norm, "mean": mean, "stderr": se,
                                 "reps": v.size, "n_ok": n})
        return rows

    def paired_difference(self, grid_index: int, worse: str, better: str, norm: str = "rel_frobenius"):
        """Mean and standard error of ``error(worse) - error(better)`` over shared replications."""
        d = self.values(grid_index, worse, norm) - self.values(grid_index, better, norm)
        d = d[np.isfinite(d)]
        if d.size < 2:
            return math.nan, math.nan
        return float(d.mean()), float(d.std(ddof=1) / math.sqrt(d.size))

    def to_csv(self, path) -> None:
        rows = self.summary()
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(list(rows[0].keys()))
            for r in rows:
                w.writerow([_fmt(v) for v in r.values()])


def _fmt(v) -> str:
    if isinstance(v, float):
        return "nan" if math.isnan(v) else format(v, ".17g")
    return str(v)


def worker_count(requested: int | None = None) -> int:
    """Threads to use: ``requested`` if given, capped by ``MULTIPOET_THREADS`` (default 1)."""
    env = os.environ.get("MULTIPOET_THREADS", "").strip()
    try:
        cap = max(1, int(env)) if env else 1
    except ValueError:
        raise InvalidConfig(f"MULTIPOET_THREADS must be an integer, got {env!r}")
    return cap if requested is None else max(1, min(int(requested), cap))


def _seed_int(gen: np.random.Generator) -> int:
    return int(gen.integers(2**31 - 1))


def _inverse(est_or_matrix) -> np.ndarray | None:
    if isinstance(est_or_matrix, CovEstimate):
        try:
            return precision_matrix(est_or_matrix)
        except NotPositiveDefinite:
            A = np.asarray(est_or_matrix.assembled)
    else:
        A = np.asarray(est_or_matrix)
    w, V = np.linalg.eigh(A)
    if w[0] <= INV_TOL * max(1.0, abs(w[-1])):
        return None
    return (V / w) @ V.T


def _errors(est: CovEstimate, Sigma: np.ndarray, W: np.ndarray, Sigma_inv: np.ndarray, norms) -> dict:
    A = np.asarray(est.assembled)
    out = {}
    for norm in norms:
        if norm == "rel_frobenius":
            out[norm] = relative_frobenius(A, None, W)
        elif norm == "max":
            out[norm] = float(np.max(np.abs(A - Sigma)))
        else:
            inv = _inverse(est)
            out[norm] = math.nan if inv is None else float(np.linalg.norm(inv - Sigma_inv, 2))
    return out


def _estimator_config(cfg: SimulationConfig, method: str, g: GridPoint, k=None, r=None) -> EstimatorConfig:
    base = EstimatorConfig(
        method="double_poet" if method.startswith("double_poet") else method,
        tau_scale=cfg.tau_scale, rule=cfg.rule, pd_floor=cfg.pd_floor, phi_scale=cfg.phi_scale,
        r_max=cfg.r_max, k_max=10 + g.J * g.r_j,
    )
    if cfg.factor_counts == "oracle":
        base = replace(base, k=g.k, r=g.r_j, r_total=g.J * g.r_j)
    if k is not None:
        base = replace(base, k=k)
    if r is not None:
        base = replace(base, r=r)
    return base


def _groups_for(method: str, cfg: SimulationConfig, dgp: DGPParams, S: np.ndarray, g: GridPoint, gi: int, rep: int):
    truth = dgp.groups
    if method == "double_poet_mix":
        return perturb_membership(truth, g.rate, stream(cfg.seed, gi, rep, PERTURB))
    if method == "double_poet_rsc":
        if cfg.factor_counts == "oracle":
            k = g.k
        else:
            k = mer_select(S, min(10 + g.J * g.r_j, g.p - 1, g.T - 2), default_phi(g.p, cfg.phi_scale),
                           local_factors=True).k_hat
        _, S_E = principal_truncation(S, k)
        found = rsc_cluster(S_E, g.J, seed=_seed_int(stream(cfg.seed, gi, rep, CLUSTER)))
        return GroupStructure(found.labels)
    return truth


def _run_cell(cfg: SimulationConfig, gi: int, rep: int):
    g = cfg.grid[gi]
    dgp = generate_model(g.p, g.T, g.J, g.k, g.r_j, g.m, seed=stream(cfg.seed, gi, rep, MODEL))
    Y = simulate_panel(dgp, stream(cfg.seed, gi, rep, PANEL)).values
    S = sample_covariance(Y)
    results, failures = {}, []

    if cfg.target == "full":
        Sigma = dgp.Sigma
        W = inverse_sqrt(Sigma)
        Sigma_inv = np.linalg.inv(Sigma)
        for method in cfg.methods:
            try:
                groups = _groups_for(method, cfg, dgp, S, g, gi, rep)
                est, _ = estimate_from_cov(S, g.T, _estimator_config(cfg, method, g), groups)
                results[method] = _errors(est, Sigma, W, Sigma_inv, cfg.norms)
            except (MultiPoetError, np.linalg.LinAlgError) as exc:
                failures.append((gi, rep, method, f"{type(exc).__name__}: {exc}"))
                results[method] = {n: math.nan for n in cfg.norms}
        return results, failures

    idx = dgp.groups.indices(cfg.block_group)
    ix = np.ix_(idx, idx)
    Sigma = dgp.Sigma[ix]
    W = inverse_sqrt(Sigma)
    Sigma_inv = np.linalg.inv(Sigma)
    S_block = S[ix]
    k_used, r_used = None, None
    if "double_poet" in cfg.methods or "poet" in cfg.methods:
        try:
            est, _ = estimate_from_cov(S, g.T, _estimator_config(cfg, "double_poet", g), dgp.groups)
            k_used, r_used = est.k_used, est.r_used[cfg.block_group - 1]
            if "double_poet" in cfg.methods:
                block = extract_local_block(est, dgp.groups, cfg.block_group)
                results["double_poet"] = _errors(block, Sigma, W, Sigma_inv, cfg.norms)
        except (MultiPoetError, np.linalg.LinAlgError) as exc:
            failures.append((gi, rep, "double_poet", f"{type(exc).__name__}: {exc}"))
    for method in cfg.methods:
        if method in results:
            continue
        try:
            if method == "samcov":
                est, _ = estimate_from_cov(S_block, g.T, EstimatorConfig("samcov"))
            elif k_used is None:
                raise InvalidConfig("no factor counts for the group-only POET fit")
            else:
                pcfg = _estimator_config(cfg, "poet", g, k=k_used + r_used)
                est, _ = estimate_from_cov(S_block, g.T, pcfg, None)
            results[method] = _errors(est, Sigma, W, Sigma_inv, cfg.norms)
        except (MultiPoetError, np.linalg.LinAlgError) as exc:
            failures.append((gi, rep, method, f"{type(exc).__name__}: {exc}"))
            results[method] = {n: math.nan for n in cfg.norms}
    return results, failures


def run_replications(cfg: SimulationConfig) -> ReplicationReport:
    """Run every grid point ``cfg.reps`` times and collect the errors.

    Failed estimates are logged and stored as NaN; they do not stop the run.
    """
    cells = [(gi, rep) for gi in range(len(cfg.grid)) for rep in range(cfg.reps)]
    workers = worker_count(cfg.workers)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(lambda c: _run_cell(cfg, *c), cells))
    else:
        outcomes = [_run_cell(cfg, *c) for c in cells]

    raw = {(gi, m, n): np.full(cfg.reps, math.nan) for gi in range(len(cfg.grid))
           for m in cfg.methods for n in cfg.norms}
    failures = []
    for (gi, rep), (res, fails) in zip(cells, outcomes):
        for m, errs in res.items():
            for n, v in errs.items():
                raw[(gi, m, n)][rep] = v
        failures.extend(fails)
    for f in failures:
        log.warning("grid %d rep %d %s failed: %s", *f)
    return ReplicationReport(cfg, raw, failures)


@dataclass(frozen=True)
class SelectionStudy:
    """MER outcomes over replications: ``k_hat`` and verdict per replication."""

    point: GridPoint
    k_hat: np.ndarray
    variants: tuple

    @property
    def mean(self) -> float:
        return float(self.k_hat.mean())

    @property
    def correct_rate(self) -> float:
        return float(np.mean(self.k_hat == self.point.k))


def selection_study(point: GridPoint, reps: int = 100, seed: int = 0, phi_scale: float = 0.3,
                    k_max: int | None = None, workers: int | None = None) -> SelectionStudy:
    """Estimate the global factor count by MER on ``reps`` simulated panels.

    ``k_max`` defaults to ``10 + J * r_j``. Panels carry local factors, so
    a lone ratio spike is read as the local level.
    """
    if reps < 1:
        raise InvalidConfig(f"reps must be at least 1, got {reps}")
    g = point
    km = min(k_max or 10 + g.J * g.r_j, g.p - 1, g.T - 2)

    def one(rep):
        dgp = generate_model(g.p, g.T, g.J, g.k, g.r_j, g.m, seed=stream(seed, 0, rep, MODEL))
        Y = simulate_panel(dgp, stream(seed, 0, rep, PANEL)).values
        return mer_select(sample_covariance(Y), km, default_phi(g.p, phi_scale), local_factors=g.r_j > 0)

    n = worker_count(workers)
    if n > 1:
        with ThreadPoolExecutor(max_workers=n) as pool:
            sels = list(pool.map(one, range(reps)))
    else:
        sels = [one(rep) for rep in range(reps)]
    return SelectionStudy(point, np.array([s.k_hat for s in sels]), tuple(s.variant for s in sels))


def growing_p_grid(ps=range(60, 601, 30), J: int = 10, T: int = 300, k: int = 3, r_j: int = 2) -> tuple:
    """Growing ``p`` with ``J`` fixed."""
    return tuple(GridPoint(int(p), T, J, k, r_j) for p in ps)


def growing_groups_grid(Js=range(2, 21), p_j: int = 30, T: int = 300, k: int = 3, r_j: int = 2) -> tuple:
    """Growing ``J`` with the group size fixed."""
    return tuple(GridPoint(int(J) * p_j, T, int(J), k, r_j) for J in Js)
