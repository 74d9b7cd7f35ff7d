"""Command-line experiment harness.

Subcommands: make-problem, solve, compare, sweep, audit.  Configuration
comes from an optional JSON file (``--config``) overridden by flags.  Every
run writes into its own directory under ``--out`` (default: the
``AIMR_OUTPUT_ROOT`` environment variable, else ``./runs``) and finishes by
writing ``manifest.json``.

Exit codes: 0 ok, 2 configuration error, 3 numerical failure, 4 guard
exceeded.
"""
from __future__ import annotations

import argparse
import concurrent.futures
import csv
import hashlib
import io
import json
import logging
import os
import platform
import sys
import tempfile
import time
from importlib import metadata

import numpy as np

from .gradient import NumericalDivergence, SolverConfig, cmr_solve, gradient_solve, ideal_reference_solve
from .greedy import GreedySchedule, greedy_identities_audit, weak_greedy_solve
from .oracle import ORACLE_GUARD, DenseOracle
from .operators import operator_to_json
from .problems import build_from_descriptor, build_weighted_metric, qoi_stats
from .problems.benchmarks import QOI_BOX
from .residual import LambdaConfig
from .tensor import FormatSpec, GuardExceeded, ct_norm, ct_to_dense, svd2d_project, tensor_to_json

logger = logging.getLogger("aimr.cli")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL, EXIT_GUARD = 0, 2, 3, 4
SOLVERS = ("aimr-direct", "aimr-greedy", "cmr-direct", "cmr-greedy", "ideal-reference")
COMPARE_FIELDS = ("solver", "delta", "norm", "rank", "err_X_canonical", "err_X_weighted",
                  "qoi_mean_err", "qoi_var_err", "config_hash", "cell_seed")
SWEEP_FIELDS = ("solver", "delta", "norm", "rank", "n_iter", "rate", "gamma_tilde", "final_err_rel",
                "best_err_rel", "stop_reason", "config_hash", "cell_seed")

DEFAULTS = {
    "problem": {"kind": "rad2d", "mesh_n": 10},
    "solver": "aimr-direct",
    "delta": [0.2],
    "rank": [10],
    "norm": ["canonical"],
    "rho": 1.0,
    "projector": "svd2d",
    "max_outer": 30,
    "p": 20,
    "seed": 0,
    "jobs": 1,
    "greedy_inner": 5,
}

FULL_SCALE = {
    "problem": {"kind": "rad2d", "mesh_n": 40},
    "delta": [0.9, 0.5, 0.2, 0.05, 0.01],
    "rank": [4, 6, 10, 15, 20],
    "max_outer": 100,
}


class ConfigError(ValueError):
    pass


def fmt(v):
    """17 significant digits for floats; plain text otherwise."""
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v)).lower()
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return "%.17g" % v
    return str(v)


EXECUTION_KEYS = ("jobs",)  # settings that cannot change any result


def config_hash(cfg):
    cfg = {k: v for k, v in cfg.items() if k not in EXECUTION_KEYS}
    text = json.dumps(cfg, sort_keys=True, default=str)
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def cell_seed(master, key):
    """Deterministic per-cell seed from the master seed and the cell key."""
    h = int.from_bytes(hashlib.sha256(json.dumps(key, sort_keys=True).encode()).digest()[:8], "little")
    return int(np.random.SeedSequence([int(master), h]).generate_state(1)[0])


def atomic_write(path, text):
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-")
    with os.fdopen(fd, "w") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _versions():
    out = {"python": platform.python_version()}
    for pkg in ("numpy", "scipy", "scikit-learn", "artifact"):
        try:
            out[pkg] = metadata.version(pkg)
        except metadata.PackageNotFoundError:
            out[pkg] = None
    return out


def write_manifest(outdir, cfg, seed, started, artifacts):
    files = {}
    for name in sorted(artifacts):
        with open(os.path.join(outdir, name), "rb") as fh:
            files[name] = hashlib.sha256(fh.read()).hexdigest()
    doc = {"config": cfg, "config_hash": config_hash(cfg), "seed": seed,
           "versions": _versions(), "wall_time": time.time() - started, "artifacts": files}
    atomic_write(os.path.join(outdir, "manifest.json"), json.dumps(doc, indent=2, sort_keys=True, default=str))


# --------------------------------------------------------------------------
# configuration
# --------------------------------------------------------------------------

def _as_list(v):
    return list(v) if isinstance(v, (list, tuple)) else [v]


def resolve_config(args):
    cfg = json.loads(json.dumps(DEFAULTS))
    if getattr(args, "paper_scale", False):
        cfg.update(json.loads(json.dumps(FULL_SCALE)))
    if args.config:
        try:
            with open(args.config) as fh:
                cfg.update(json.load(fh))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError("cannot read config %s: %s" % (args.config, exc)) from exc
    if getattr(args, "problem", None):
        try:
            with open(args.problem) as fh:
                doc = json.load(fh)
            # make-problem output nests the descriptor next to informational fields
            cfg["problem"] = doc.get("descriptor", doc)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError("cannot read problem descriptor %s: %s" % (args.problem, exc)) from exc
    for key in ("solver", "rho", "projector", "max_outer", "p", "seed", "jobs", "greedy_inner"):
        val = getattr(args, key, None)
        if val is not None:
            cfg[key] = val
    for key in ("delta", "rank", "norm"):
        val = getattr(args, key, None)
        if val is not None:
            cfg[key] = val
    if getattr(args, "mesh_n", None) is not None:
        cfg["problem"] = dict(cfg["problem"], mesh_n=args.mesh_n)
    for key in ("delta", "rank", "norm"):
        cfg[key] = _as_list(cfg[key])
        if not cfg[key]:
            raise ConfigError("grid %r is empty" % key)
    solvers = _as_list(cfg["solver"])
    for s in solvers:
        if s not in SOLVERS:
            raise ConfigError("unknown solver %r (choose from %s)" % (s, ", ".join(SOLVERS)))
    cfg["solver"] = solvers if len(solvers) > 1 else solvers[0]
    for n in cfg["norm"]:
        if n not in ("canonical", "weighted"):
            raise ConfigError("norm must be canonical or weighted, got %r" % n)
    for d in cfg["delta"]:
        if not 0.0 <= float(d) < 1.0:
            raise ConfigError("delta must lie in [0, 1), got %r" % d)
    for r in cfg["rank"]:
        if int(r) < 1:
            raise ConfigError("rank must be >= 1, got %r" % r)
    return cfg


def output_dir(args, name):
    root = args.out or os.environ.get("AIMR_OUTPUT_ROOT", "runs")
    path = os.path.join(root, name) if not args.out else root
    os.makedirs(path, exist_ok=True)
    return path


# --------------------------------------------------------------------------
# cells
# --------------------------------------------------------------------------

def _problem_for(cfg, norm):
    desc = dict(cfg["problem"])
    if desc.get("kind") == "identity" and norm == "weighted":
        raise ConfigError("the identity problem has no weighted norm")
    desc["norm"] = norm
    return build_from_descriptor(desc)


def _oracle_for(problem):
    if problem.n_unknowns > ORACLE_GUARD or problem.order != 2:
        return None
    return DenseOracle(problem)


def run_cell(cfg, solver, delta, rank, norm, seed, oracle=None, problem=None):
    """One solver run; returns ``(u, trace_or_diagnostics, problem)``."""
    problem = problem or _problem_for(cfg, norm)
    order = problem.order
    projector = cfg["projector"] if order == 2 or cfg["projector"] != "svd2d" else "als"
    spec = FormatSpec(int(rank), projector)
    lam = LambdaConfig(delta=float(delta), p=int(cfg["p"])) if delta > 0 else None
    scfg = SolverConfig(delta=float(delta), rho=float(cfg["rho"]) if solver == "ideal-reference" else 1.0,
                        max_outer=int(cfg["max_outer"]), projector=spec, lambda_cfg=lam, seed=seed)
    if solver == "aimr-direct":
        return (*gradient_solve(problem, scfg, oracle=oracle), problem)
    if solver == "ideal-reference":
        return (*ideal_reference_solve(problem, spec, scfg, oracle=oracle), problem)
    if solver == "aimr-greedy":
        if delta == 0:
            raise ConfigError("aimr-greedy needs delta > 0")
        sched = GreedySchedule(r_max=int(rank), delta=float(delta))
        gcfg = scfg.replace(max_outer=int(cfg["greedy_inner"]))
        return (*weak_greedy_solve(problem, sched, gcfg, oracle=oracle), problem)
    strategy = "direct" if solver == "cmr-direct" else "greedy"
    return (*cmr_solve(problem, spec, scfg, strategy=strategy, oracle=oracle), problem)


def _errors(u, problem, oracle, u_ref):
    """Relative X-errors in both norms and absolute QoI mean/variance errors."""
    out = {"err_X_canonical": float("nan"), "err_X_weighted": float("nan"),
           "qoi_mean_err": float("nan"), "qoi_var_err": float("nan")}
    if oracle is None or u_ref is None:
        return out
    diff = oracle.u - ct_to_dense(u).ravel()
    out["err_X_canonical"] = float(np.linalg.norm(diff) / np.linalg.norm(oracle.u))
    if problem.mesh is not None:
        wm = build_weighted_metric(problem, QOI_BOX, problem.meta.get("weight", 1e3)).to_sparse()
        out["err_X_weighted"] = float(np.sqrt(diff @ (wm @ diff) / (oracle.u @ (wm @ oracle.u))))
    if problem.qoi is not None:
        m0, v0 = qoi_stats(u_ref, problem.qoi)
        m1, v1 = qoi_stats(u, problem.qoi)
        out["qoi_mean_err"] = abs(m1 - m0)
        out["qoi_var_err"] = abs(v1 - v0)
    return out


def _compare_cell(cfg, solver, delta, rank, norm, master):
    key = {"solver": solver, "delta": delta, "rank": rank, "norm": norm}
    seed = cell_seed(master, key)
    cell_cfg = dict(cfg, solver=solver, delta=delta, rank=rank, norm=norm, seed=master)
    problem = _problem_for(cfg, norm)
    oracle = _oracle_for(problem)
    u, _, problem = run_cell(cfg, solver, delta, rank, norm, seed, oracle=oracle, problem=problem)
    row = dict(key, **_errors(u, problem, oracle, oracle.solution() if oracle else None))
    row["config_hash"] = config_hash(cell_cfg)
    row["cell_seed"] = seed
    return row


def _sweep_cell(cfg, solver, delta, rank, norm, master, outdir):
    key = {"solver": solver, "delta": delta, "rank": rank, "norm": norm}
    seed = cell_seed(master, key)
    cell_cfg = dict(cfg, solver=solver, delta=delta, rank=rank, norm=norm, seed=master)
    h = config_hash(cell_cfg)
    problem = _problem_for(cfg, norm)
    oracle = _oracle_for(problem)
    u, tr, problem = run_cell(cfg, solver, delta, rank, norm, seed, oracle=oracle, problem=problem)
    name = "cell-%s.csv" % h
    text = tr.to_csv(extra={"config_hash": h}) if hasattr(tr, "to_csv") else ""
    atomic_write(os.path.join(outdir, name), text)
    unorm = oracle.x_norm(oracle.u) if oracle else float("nan")
    row = dict(key)
    row.update({
        "n_iter": len(tr),
        "rate": getattr(tr, "rate", float("nan")),
        "gamma_tilde": getattr(tr, "gamma_tilde", float("nan")),
        "final_err_rel": oracle.error(u) / unorm if oracle else float("nan"),
        "best_err_rel": oracle.best_error(int(rank)) / unorm if oracle else float("nan"),
        "stop_reason": getattr(tr, "stop_reason", getattr(tr, "status", "")),
        "config_hash": h,
        "cell_seed": seed,
    })
    return row, name


def _write_rows(path, fields, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(fields)
    for r in rows:
        w.writerow([fmt(r[f]) for f in fields])
    atomic_write(path, buf.getvalue())


def _grid(cfg):
    solvers = _as_list(cfg["solver"])
    return [(s, float(d), int(r), n) for s in solvers for d in cfg["delta"] for r in cfg["rank"]
            for n in cfg["norm"]]


def _run_grid(fn, cells, jobs):
    if jobs <= 1 or len(cells) == 1:
        return [fn(*c) for c in cells]
    with concurrent.futures.ProcessPoolExecutor(max_workers=jobs) as ex:
        return list(ex.map(fn, *zip(*cells)))


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------

def cmd_make_problem(args):
    started = time.time()
    cfg = resolve_config(args)
    desc = dict(cfg["problem"])
    desc["norm"] = cfg["norm"][0]
    if args.weight is not None:
        desc["weight"] = args.weight
    problem = build_from_descriptor(desc)
    outdir = output_dir(args, "problem-%s" % config_hash(desc))
    desc_doc = {"descriptor": desc, "dims": list(problem.dims), "operator_rank": problem.a.rank,
                "meta": problem.meta}
    atomic_write(os.path.join(outdir, "problem.json"), json.dumps(desc_doc, indent=2, default=str))
    atomic_write(os.path.join(outdir, "operator.json"), operator_to_json(problem.a))
    atomic_write(os.path.join(outdir, "rhs.json"), tensor_to_json(problem.b))
    write_manifest(outdir, {"problem": desc}, None, started, ["problem.json", "operator.json", "rhs.json"])
    print(os.path.join(outdir, "problem.json"))
    return EXIT_OK


def cmd_solve(args):
    started = time.time()
    cfg = resolve_config(args)
    if isinstance(cfg["solver"], list):
        raise ConfigError("solve takes exactly one solver")
    solver, delta, rank, norm = cfg["solver"], float(cfg["delta"][0]), int(cfg["rank"][0]), cfg["norm"][0]
    h = config_hash(cfg)
    outdir = output_dir(args, "solve-%s" % h)
    problem = _problem_for(cfg, norm)
    oracle = _oracle_for(problem) if (args.oracle or solver == "ideal-reference") else None
    u, tr, problem = run_cell(cfg, solver, delta, rank, norm, int(cfg["seed"]), oracle=oracle, problem=problem)
    arts = {"solution.json": tensor_to_json(u), "trace.csv": tr.to_csv(extra={"config_hash": h}),
            "trace.json": tr.to_json()}
    for name, text in arts.items():
        atomic_write(os.path.join(outdir, name), text)
    write_manifest(outdir, cfg, cfg["seed"], started, list(arts))
    print(json.dumps({"outdir": outdir, "rank": u.rank, "norm_u": ct_norm(u)}, default=str))
    return EXIT_OK


def cmd_compare(args):
    started = time.time()
    cfg = resolve_config(args)
    outdir = output_dir(args, "compare-%s" % config_hash(cfg))
    cells = [(cfg, s, d, r, n, int(cfg["seed"])) for s, d, r, n in _grid(cfg)]
    rows = _run_grid(_compare_cell, cells, int(cfg["jobs"]))
    _write_rows(os.path.join(outdir, "compare.csv"), COMPARE_FIELDS, rows)
    write_manifest(outdir, cfg, cfg["seed"], started, ["compare.csv"])
    print(os.path.join(outdir, "compare.csv"))
    return EXIT_OK


def cmd_sweep(args):
    started = time.time()
    cfg = resolve_config(args)
    outdir = output_dir(args, "sweep-%s" % config_hash(cfg))
    cells = [(cfg, s, d, r, n, int(cfg["seed"]), outdir) for s, d, r, n in _grid(cfg)]
    results = _run_grid(_sweep_cell, cells, int(cfg["jobs"]))
    rows = [r for r, _ in results]
    _write_rows(os.path.join(outdir, "sweep.csv"), SWEEP_FIELDS, rows)
    write_manifest(outdir, cfg, cfg["seed"], started, ["sweep.csv"] + [n for _, n in results])
    print(os.path.join(outdir, "sweep.csv"))
    return EXIT_OK


def cmd_audit(args):
    started = time.time()
    cfg = resolve_config(args)
    delta, rank, norm = float(cfg["delta"][0]), int(cfg["rank"][0]), cfg["norm"][0]
    h = config_hash(cfg)
    outdir = output_dir(args, "audit-%s" % h)
    problem = _problem_for(cfg, norm)
    if problem.order != 2:
        raise ConfigError("the identity audit needs an order-2 problem")
    oracle = DenseOracle(problem)
    if delta == 0.0:
        u_ref = oracle.solution()
        corrections, f = [], u_ref
        for _ in range(rank):
            w = svd2d_project(f, 1, problem.rx)
            corrections.append(w)
            f = f - w
    else:
        sched = GreedySchedule(r_max=rank, delta=delta)
        scfg = SolverConfig(delta=delta, max_outer=int(cfg["greedy_inner"]), seed=int(cfg["seed"]),
                            lambda_cfg=LambdaConfig(delta=delta, p=int(cfg["p"])))
        _, diag = weak_greedy_solve(problem, sched, scfg, oracle=oracle)
        corrections = diag.corrections
    rep = greedy_identities_audit(oracle.u, corrections, problem.rx)
    fields = ("m", "f_norm", "w_tilde_norm", "w_norm", "kappa", "mu", "gamma", "alpha", "alpha_tilde",
              "energy_residual", "sandwich_ok", "mu_half_ok", "telescoping_residual", "hypothesis_ok")
    rows = [dict((f, getattr(s, f)) for f in fields) for s in rep.steps]
    for r in rows:
        r["config_hash"] = h
    _write_rows(os.path.join(outdir, "audit.csv"), fields + ("config_hash",), rows)
    atomic_write(os.path.join(outdir, "audit.json"), json.dumps({"ok": rep.ok, "failures": rep.failures}))
    write_manifest(outdir, cfg, cfg["seed"], started, ["audit.csv", "audit.json"])
    print(json.dumps({"ok": rep.ok, "failures": rep.failures, "outdir": outdir}))
    return EXIT_OK if rep.ok else EXIT_NUMERICAL


# --------------------------------------------------------------------------
# entry point
# --------------------------------------------------------------------------

def _floats(text):
    return [float(t) for t in text.split(",") if t]


def _ints(text):
    return [int(t) for t in text.split(",") if t]


def _strs(text):
    return [t for t in text.split(",") if t]


def build_parser():
    p = argparse.ArgumentParser(prog="aimr", description="Low-rank minimal residual experiments.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="JSON configuration file")
        sp.add_argument("--problem", help="problem descriptor JSON (from make-problem)")
        sp.add_argument("--mesh-n", type=int, dest="mesh_n")
        sp.add_argument("--norm", type=_strs, help="canonical,weighted")
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--paper-scale", action="store_true", help="full-size problem and parameter grids")

    def solver_flags(sp):
        sp.add_argument("--solver", type=lambda t: _strs(t) if "," in t else t)
        sp.add_argument("--delta", type=_floats, help="comma-separated list")
        sp.add_argument("--rank", type=_ints, help="comma-separated list")
        sp.add_argument("--rho", type=float)
        sp.add_argument("--projector", choices=("svd2d", "als", "greedy-rank-one"))
        sp.add_argument("--max-outer", type=int, dest="max_outer")
        sp.add_argument("--p", type=int, help="lag of the residual stagnation test")
        sp.add_argument("--greedy-inner", type=int, dest="greedy_inner",
                        help="gradient iterations per greedy correction")
        sp.add_argument("--jobs", type=int)

    mp = sub.add_parser("make-problem", help="write a problem descriptor and serialized operator")
    common(mp)
    mp.add_argument("--kind", choices=("rad2d", "highdim", "identity"))
    mp.add_argument("--degree", type=int)
    mp.add_argument("--n-modes", type=int, dest="n_modes")
    mp.add_argument("--weight", type=float)
    mp.set_defaults(func=cmd_make_problem)

    for name, fn, hlp in (("solve", cmd_solve, "single solver run"),
                          ("compare", cmd_compare, "error table over a solver grid"),
                          ("sweep", cmd_sweep, "rate / final-error table over a parameter grid"),
                          ("audit", cmd_audit, "greedy energy-identity audit against the dense oracle")):
        sp = sub.add_parser(name, help=hlp)
        common(sp)
        solver_flags(sp)
        if name == "solve":
            sp.add_argument("--oracle", action="store_true", help="record exact errors (guard-sized problems)")
        sp.set_defaults(func=fn)
    return p


def _apply_kind_flags(args):
    if getattr(args, "kind", None) is None:
        return
    desc = {"kind": args.kind}
    if args.kind in ("rad2d", "highdim"):
        desc["mesh_n"] = args.mesh_n or (10 if args.kind == "rad2d" else 8)
    if args.kind == "highdim":
        desc["degree"] = args.degree if args.degree is not None else 2
        desc["n_modes"] = args.n_modes if args.n_modes is not None else 2
    args._kind_desc = desc


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    _apply_kind_flags(args)
    if hasattr(args, "_kind_desc"):
        fd, path = tempfile.mkstemp(suffix=".json")
        with os.fdopen(fd, "w") as fh:
            json.dump(args._kind_desc, fh)
        args.problem = path
    try:
        return args.func(args)
    except GuardExceeded as exc:
        code, kind, err = EXIT_GUARD, "guard_exceeded", exc
    except (ConfigError, ValueError, TypeError, KeyError) as exc:
        code, kind, err = EXIT_CONFIG, "config_error", exc
    except (NumericalDivergence, ArithmeticError, np.linalg.LinAlgError) as exc:
        code, kind, err = EXIT_NUMERICAL, "numerical_failure", exc
    err = {"error": kind, "exit_code": code, "message": str(err), "type": type(err).__name__}
    print(json.dumps(err), file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
