"""Command-line interface.

Subcommands: ``simulate``, ``select``, ``estimate``, ``cluster``,
``backtest`` and ``panel``. Options come from flags and, optionally, a flat
``key = value`` file given with ``--config``; flags win over the file and
unknown keys are rejected. Exit status is 0 on success, 2 for configuration
or input errors and 3 for numerical failures.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .clustering import misclassification_rate, rsc_cluster
from .csvio import (
    fmt,
    read_label_csv,
    read_membership_csv,
    read_returns_csv,
    write_labels_csv,
    write_manifest,
    write_matrix_csv,
    write_returns_csv,
)
from .dgp import generate_model, simulate_panel, stream, PANEL
from .errors import (
    ClusteringFailed,
    GenerationFailed,
    InvalidConfig,
    InvalidResidualDiagonal,
    MultiPoetError,
    NotPositiveDefinite,
    SolverFailed,
)
from .estimators import GroupStructure, principal_truncation, sample_covariance
from .pipeline import METHODS, EstimatorConfig, estimate_from_cov
from .portfolio import backtest, write_backtest_csv
from .selection import default_k_max, default_phi, mer_select
from .simulation import FULL_METHODS, GridPoint, SimulationConfig, run_replications, selection_study

log = logging.getLogger("multipoet")

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC = 0, 2, 3
NUMERIC_ERRORS = (NotPositiveDefinite, InvalidResidualDiagonal, ClusteringFailed, GenerationFailed, SolverFailed,
                  np.linalg.LinAlgError)


# --------------------------------------------------------------------------
# value parsers shared by flags and the config file
# --------------------------------------------------------------------------


def _int(s):
    try:
        return int(str(s).strip())
    except ValueError:
        raise InvalidConfig(f"expected an integer, got {s!r}") from None


def _float(s):
    try:
        return float(str(s).strip())
    except ValueError:
        raise InvalidConfig(f"expected a number, got {s!r}") from None


def _int_list(s):
    return tuple(_int(x) for x in str(s).split(",") if x.strip())


def _float_list(s):
    return tuple(_float(x) for x in str(s).split(",") if x.strip())


def _str_list(s):
    return tuple(x.strip() for x in str(s).split(",") if x.strip())


def _auto_int(s):
    s = str(s).strip().lower()
    return None if s == "auto" else _int(s)


def _counts(s):
    s = str(s).strip().lower()
    if s == "auto":
        return None
    vals = _int_list(s)
    return vals[0] if len(vals) == 1 else vals


def _opt_float(s):
    s = str(s).strip().lower()
    return None if s in ("none", "off") else _float(s)


def _bool(s):
    s = str(s).strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise InvalidConfig(f"expected a boolean, got {s!r}")


def _choice(*allowed):
    def parse(s):
        s = str(s).strip()
        if s not in allowed:
            raise InvalidConfig(f"expected one of {', '.join(allowed)}, got {s!r}")
        return s
    return parse


FLAG = object()  # marks store_true options

# name -> (parser, default, help); a parser of FLAG means an on/off switch
ESTIMATOR_OPTS = {
    "method": (_choice(*METHODS), "double_poet", "estimator"),
    "k": (_auto_int, None, "global factor count or 'auto' (MER)"),
    "r": (_counts, None, "local factor count, one per group (comma list) or 'auto' (ER)"),
    "r-total": (_auto_int, None, "POET2 extra component count (default: sum of r)"),
    "kmax": (_auto_int, None, "largest k tried by MER"),
    "rmax": (_int, 10, "largest r_j tried by ER"),
    "phi-scale": (_float, 0.3, "MER threshold is phi-scale * log(p)"),
    "tau": (_opt_float, None, "threshold constant (default: rate-based)"),
    "tau-scale": (_float, 0.5, "constant C of the rate-based threshold"),
    "rule": (_choice("soft", "hard", "sector"), "soft", "thresholding rule"),
    "pd-floor": (_opt_float, 0.1, "raise tau until the residual is positive definite ('none' to disable)"),
    "sectors": (str, None, "CSV of asset_id,sector for --rule sector"),
    "membership": (str, None, "CSV of asset_id,group"),
    "cluster": (_auto_int, None, "detect K groups by spectral clustering instead of --membership"),
    "seed": (_int, 0, "master random seed"),
}

COMMANDS = {
    "simulate": {
        "p": (_int_list, (300,), "asset counts (comma list)"),
        "J": (_int_list, (10,), "group counts (comma list)"),
        "pj": (_auto_int, None, "fixed group size; sets p = J * pj for each J"),
        "T": (_int, 300, "observations"),
        "k": (_int, 3, "true global factors"),
        "rj": (_int, 2, "true local factors per group"),
        "m": (_float, 0.3, "sparsity of the idiosyncratic covariance"),
        "rates": (_float_list, (0.0,), "membership misclassification rates for double_poet_mix"),
        "methods": (_str_list, ("samcov", "poet", "poet2", "double_poet"), "methods (comma list)"),
        "reps": (_int, 50, "replications per grid point"),
        "seed": (_int, 0, "master random seed"),
        "counts": (_choice("auto", "oracle"), "auto", "estimate factor counts or use the true ones"),
        "target": (_choice("full", "block"), "full", "score the full matrix or one group's block"),
        "block-group": (_int, 1, "group scored when --target block"),
        "tau-scale": (_float, 0.5, "constant C of the rate-based threshold"),
        "rule": (_choice("soft", "hard"), "soft", "thresholding rule"),
        "pd-floor": (_opt_float, 0.1, "positive-definiteness guard ('none' to disable)"),
        "phi-scale": (_float, 0.3, "MER threshold is phi-scale * log(p)"),
        "rmax": (_int, 10, "largest r_j tried by ER"),
        "workers": (_auto_int, None, "threads (capped by MULTIPOET_THREADS)"),
        "selection": (FLAG, False, "also tabulate MER outcomes per grid point"),
        "out": (str, "out", "output directory"),
    },
    "select": {
        "kmax": (_auto_int, None, "largest k tried"),
        "phi-scale": (_float, 0.3, "threshold is phi-scale * log(p)"),
        "local": (FLAG, False, "the data carry local factors: a lone ratio spike means k = 0"),
        "membership": (str, None, "CSV of asset_id,group (implies --local)"),
        "rmax": (_int, 10, "per-group bound used for the default kmax"),
        "csv": (FLAG, False, "machine-readable output"),
    },
    "estimate": {
        **ESTIMATOR_OPTS,
        "truth": (str, None, "CSV of asset_id,group to score --cluster against"),
        "parts": (FLAG, False, "also write the global, local and residual parts"),
        "repair": (FLAG, False, "floor residual eigenvalues when thresholding breaks definiteness"),
        "out": (str, "out", "output directory"),
    },
    "cluster": {
        "cluster": (_int, None, "number of groups K (required)"),
        "k": (_auto_int, None, "global factors removed first, or 'auto'"),
        "kmax": (_auto_int, None, "largest k tried by MER"),
        "phi-scale": (_float, 0.3, "MER threshold is phi-scale * log(p)"),
        "seed": (_int, 0, "k-means seed"),
        "truth": (str, None, "CSV of asset_id,group to score against"),
        "out": (str, "out", "output directory"),
    },
    "backtest": {
        **{k: v for k, v in ESTIMATOR_OPTS.items() if k != "method"},
        "methods": (_str_list, ("poet", "double_poet"), "estimators (comma list)"),
        "c-grid": (_float_list, (1.0, 1.5, 2.0, 2.5, 3.0, 3.5, 4.0), "gross exposure bounds"),
        "window": (_int, 104, "estimation window in rows"),
        "hold": (_int, 4, "holding period in rows when the panel has no dates"),
        "out": (str, "out", "output directory"),
    },
    "panel": {
        "p": (_int, 300, "assets"),
        "T": (_int, 300, "observations"),
        "J": (_int, 10, "groups"),
        "k": (_int, 3, "global factors"),
        "rj": (_int, 2, "local factors per group"),
        "m": (_float, 0.3, "sparsity of the idiosyncratic covariance"),
        "seed": (_int, 0, "random seed"),
        "sigma": (FLAG, False, "also write the population covariance"),
        "out": (str, "out", "output directory"),
    },
}

POSITIONAL = {"select", "estimate", "cluster", "backtest"}


def _dest(name: str) -> str:
    return name.replace("-", "_")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="multipoet", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"multipoet {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)
    for cmd, opts in COMMANDS.items():
        sp = sub.add_parser(cmd)
        if cmd in POSITIONAL:
            sp.add_argument("returns", help="returns CSV: header of asset ids, optional leading date column")
        sp.add_argument("--config", help="flat key = value file; flags override it")
        for name, (parse, default, text) in opts.items():
            if parse is FLAG:
                sp.add_argument(f"--{name}", dest=_dest(name), action="store_const", const="true", default=None,
                                help=text)
            else:
                shown = "auto" if default is None else default
                if isinstance(shown, tuple):
                    shown = ",".join(str(x) for x in shown)
                sp.add_argument(f"--{name}", dest=_dest(name), default=None, help=f"{text} (default: {shown})")
    return parser


def read_config(path) -> dict:
    out = {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise InvalidConfig(f"cannot read config {path}: {exc}") from None
    for n, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InvalidConfig(f"{path}:{n}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("_", "-")] = value
    return out


def resolve(args: argparse.Namespace) -> dict:
    """Merge defaults, the config file and flags into typed option values."""
    opts = COMMANDS[args.command]
    from_file = read_config(args.config) if args.config else {}
    unknown = sorted(set(from_file) - set(opts))
    if unknown:
        raise InvalidConfig(f"unknown config keys for {args.command}: {', '.join(unknown)}")
    resolved = {}
    for name, (parse, default, _) in opts.items():
        raw = getattr(args, _dest(name))
        if raw is None:
            raw = from_file.get(name)
        if raw is None:
            resolved[name] = default
            continue
        try:
            resolved[name] = _bool(raw) if parse is FLAG else parse(raw)
        except InvalidConfig as exc:
            raise InvalidConfig(f"--{name}: {exc}") from None
    return resolved


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------


def _out_dir(o) -> Path:
    path = Path(o["out"])
    path.mkdir(parents=True, exist_ok=True)
    return path


def _manifest(command: str, o: dict, extra: dict | None = None) -> dict:
    items = {"command": command, "version": __version__}
    for k, v in o.items():
        items[k] = ",".join(str(x) for x in v) if isinstance(v, tuple) else v
    items.update(extra or {})
    return items


def _estimator_config(o: dict, method: str) -> EstimatorConfig:
    return EstimatorConfig(
        method=method, k=o["k"], r=o["r"], r_total=o["r-total"], tau=o["tau"], tau_scale=o["tau-scale"],
        rule=o["rule"], k_max=o["kmax"], r_max=o["rmax"], phi_scale=o["phi-scale"],
        repair=o.get("repair", False), pd_floor=o["pd-floor"],
    )


def _groups(o: dict, panel, S: np.ndarray, notes: dict) -> GroupStructure | None:
    if o.get("membership") and o.get("cluster"):
        raise InvalidConfig("give either --membership or --cluster, not both")
    if o.get("membership"):
        return read_membership_csv(o["membership"], panel.asset_ids)
    K = o.get("cluster")
    if not K:
        return None
    k = o["k"]
    if k is None:
        p = S.shape[0]
        km = o["kmax"] or default_k_max(p, panel.T, K, o["rmax"])
        k = mer_select(S, min(km, p - 1, panel.T - 2), default_phi(p, o["phi-scale"]), local_factors=True).k_hat
    _, S_E = principal_truncation(S, k)
    found = rsc_cluster(S_E, K, seed=o["seed"])
    notes["cluster_k_removed"] = k
    notes["cluster_inertia"] = fmt(found.inertia)
    if o.get("truth"):
        truth = read_membership_csv(o["truth"], panel.asset_ids)
        notes["misclassification_rate"] = fmt(misclassification_rate(found, truth))
    return GroupStructure(found.labels)


def _with_sectors(cfg: EstimatorConfig, o: dict, panel) -> EstimatorConfig:
    if cfg.rule in ("sector", "sector_block"):
        if not o.get("sectors"):
            raise InvalidConfig("--rule sector needs --sectors")
        return cfg.with_(sector_labels=tuple(read_label_csv(o["sectors"], panel.asset_ids, "sector")))
    return cfg


def cmd_simulate(o: dict) -> int:
    bad = [m for m in o["methods"] if m not in FULL_METHODS]
    if bad:
        raise InvalidConfig(f"unknown methods {bad}; choose from {', '.join(FULL_METHODS)}")
    if o["pj"] is not None:
        sizes = [(J * o["pj"], J) for J in o["J"]]
    else:
        sizes = [(p, J) for p in o["p"] for J in o["J"]]
    grid = tuple(GridPoint(p, o["T"], J, o["k"], o["rj"], o["m"], rate) for p, J in sizes for rate in o["rates"])
    cfg = SimulationConfig(
        grid=grid, methods=o["methods"], reps=o["reps"], seed=o["seed"], factor_counts=o["counts"],
        target=o["target"], block_group=o["block-group"], tau_scale=o["tau-scale"], rule=o["rule"],
        pd_floor=o["pd-floor"], phi_scale=o["phi-scale"], r_max=o["rmax"], workers=o["workers"],
    )
    out = _out_dir(o)
    report = run_replications(cfg)
    report.to_csv(out / "errors.csv")
    extra = {"grid_points": len(grid), "failures": len(report.failures),
             "streams": "Philox(SeedSequence(seed, spawn_key=(grid_index, replication, purpose)))"}
    if o["selection"]:
        lines = ["p,T,J,k,r_j,mean_k_hat,correct_rate,reps"]
        for g in {(g.p, g.T, g.J, g.k, g.r_j, g.m) for g in grid}:
            pt = GridPoint(*g)
            st = selection_study(pt, o["reps"], o["seed"], o["phi-scale"], workers=o["workers"])
            lines.append(",".join(str(x) for x in g[:5]) + f",{fmt(st.mean)},{fmt(st.correct_rate)},{o['reps']}")
        (out / "selection.csv").write_text("\n".join([lines[0], *sorted(lines[1:])]) + "\n")
    write_manifest(out / "manifest.txt", _manifest("simulate", o, extra))
    for f in report.failures:
        print(f"warning: grid {f[0]} rep {f[1]} {f[2]}: {f[3]}", file=sys.stderr)
    return EXIT_OK


def cmd_select(o: dict, returns: str) -> int:
    panel = read_returns_csv(returns)
    S = sample_covariance(panel)
    local = o["local"] or bool(o["membership"])
    J = read_membership_csv(o["membership"], panel.asset_ids).J if o["membership"] else 1
    km = o["kmax"] or default_k_max(panel.p, panel.T, J, o["rmax"])
    km = min(km, panel.p - 1, panel.T - 2)
    sel = mer_select(S, km, default_phi(panel.p, o["phi-scale"]), local_factors=local)
    if o["csv"]:
        print("key,value")
        for key in ("variant", "k_hat", "k1", "k2", "er1", "er2", "phi_p"):
            v = getattr(sel, key)
            print(f"{key},{fmt(v) if isinstance(v, float) else v}")
        print("m,ratio")
        for m, r in enumerate(sel.ratios, start=1):
            print(f"{m},{fmt(r)}")
    else:
        print(f"variant: {sel.variant}")
        print(f"k_hat: {sel.k_hat}")
        print(f"k1: {sel.k1} (ER = {sel.er1:.4g})")
        print(f"k2: {sel.k2} (ER = {sel.er2:.4g})")
        print(f"phi_p: {sel.phi_p:.4g}")
        print("  m  ER(m)")
        for m, r in enumerate(sel.ratios, start=1):
            print(f"{m:3d}  {r:.6g}")
    return EXIT_OK


def cmd_estimate(o: dict, returns: str) -> int:
    panel = read_returns_csv(returns)
    S = sample_covariance(panel)
    notes = {}
    groups = _groups(o, panel, S, notes)
    cfg = _with_sectors(_estimator_config(o, o["method"]), o, panel)
    if cfg.method == "double_poet" and groups is None:
        raise InvalidConfig("double_poet needs --membership or --cluster K")
    est, info = estimate_from_cov(S, panel.T, cfg, groups)
    out = _out_dir(o)
    ids = panel.asset_ids
    write_matrix_csv(out / "covariance.csv", est.assembled, ids)
    if o["parts"]:
        write_matrix_csv(out / "global.csv", est.global_part, ids)
        write_matrix_csv(out / "local.csv", est.local_part, ids)
        write_matrix_csv(out / "residual.csv", est.residual_part, ids)
    if groups is not None and o.get("cluster"):
        write_labels_csv(out / "membership.csv", ids, groups.membership)
    extra = {"k_used": est.k_used, "r_used": ",".join(str(x) for x in est.r_used), "tau_used": fmt(est.tau),
             "T": panel.T, "p": panel.p}
    if info.selection is not None:
        extra["mer_variant"] = info.selection.variant
    extra.update(notes)
    for i, note in enumerate(info.notes):
        extra[f"note_{i + 1}"] = note
    write_manifest(out / "manifest.txt", _manifest("estimate", o, extra))
    log.info("tau used %.6g", est.tau)
    return EXIT_OK


def cmd_cluster(o: dict, returns: str) -> int:
    if not o["cluster"]:
        raise InvalidConfig("cluster needs --cluster K")
    panel = read_returns_csv(returns)
    S = sample_covariance(panel)
    notes = {}
    o2 = {**o, "rmax": 10, "membership": None}
    groups = _groups(o2, panel, S, notes)
    out = _out_dir(o)
    write_labels_csv(out / "membership.csv", panel.asset_ids, groups.membership)
    write_manifest(out / "manifest.txt", _manifest("cluster", o, notes))
    if "misclassification_rate" in notes:
        print(f"misclassification_rate: {notes['misclassification_rate']}")
    return EXIT_OK


def cmd_backtest(o: dict, returns: str) -> int:
    panel = read_returns_csv(returns)
    bad = [m for m in o["methods"] if m not in METHODS]
    if bad:
        raise InvalidConfig(f"unknown methods {bad}; choose from {', '.join(METHODS)}")
    notes = {}
    groups = None
    # detected groups come from the first estimation window only, so no later data leaks in
    if o["membership"] or o["cluster"]:
        groups = _groups(o, panel, sample_covariance(panel.values[: o["window"]]), notes)
    reports = []
    for method in o["methods"]:
        if method == "double_poet" and groups is None:
            raise InvalidConfig("double_poet needs --membership or --cluster K")
        cfg = _with_sectors(_estimator_config({**o, "repair": False}, method), o, panel)
        reports.extend(backtest(panel, cfg, o["c-grid"], o["window"], o["hold"], groups))
    out = _out_dir(o)
    write_backtest_csv(out / "risks.csv", reports)
    extra = dict(notes)
    for rep in reports:
        extra[f"risk[{rep.method},c={rep.c:g}]"] = fmt(rep.overall_risk)
        extra[f"periods[{rep.method},c={rep.c:g}]"] = len(rep.period_risks)
        if rep.skipped:
            extra[f"skipped[{rep.method},c={rep.c:g}]"] = len(rep.skipped)
    write_manifest(out / "manifest.txt", _manifest("backtest", o, extra))
    return EXIT_OK


def cmd_panel(o: dict) -> int:
    dgp = generate_model(o["p"], o["T"], o["J"], o["k"], o["rj"], o["m"], seed=o["seed"])
    panel = simulate_panel(dgp, stream(o["seed"], PANEL))
    out = _out_dir(o)
    write_returns_csv(out / "returns.csv", panel)
    write_labels_csv(out / "membership.csv", panel.asset_ids, dgp.groups.membership)
    if o["sigma"]:
        write_matrix_csv(out / "sigma.csv", dgp.Sigma, panel.asset_ids)
    write_manifest(out / "manifest.txt", _manifest("panel", o))
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        o = resolve(args)
        if args.command in POSITIONAL:
            return globals()[f"cmd_{args.command}"](o, args.returns)
        return globals()[f"cmd_{args.command}"](o)
    except NUMERIC_ERRORS as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (MultiPoetError, OSError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INPUT
