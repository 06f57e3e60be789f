"""Command line interface: ``fdsys <subcommand> PROBLEM [flags]``.

PROBLEM is a JSON problem file or ``builtin:NAME``.  Exit codes: 0 success,
2 non-contractive, 3 invalid input or out of scope, 4 numeric failure,
5 global partition or grid failure, 6 assumption violation.
"""

import argparse
import csv
import io
import json
import math
import os
import platform
import sys
import tempfile
import time
from datetime import datetime, timezone

import numpy as np

from . import __version__
from .errors import (BudgetExceeded, DomainError, FdsError, GridOutOfRange, InvalidGrid,
                     MaxIterExceeded, NonContractive, NonFinite, PartitionExhausted,
                     ValidationError)
from .globalsolve import solve_global
from .operators import check_L1
from .picard import solve_local
from .problemfile import load
from .registry import builtin_document, builtin_names, oracle_y0
from .space import build_tree, h2_norm, s2_norm
from .verify import (backward_residual, check_A1, check_A2, check_ym_lipschitz,
                     forward_residual, to_fbsde_triple)

EXIT_OK = 0
EXIT_NONCONTRACTIVE = 2
EXIT_INVALID = 3
EXIT_NUMERIC = 4
EXIT_GLOBAL = 5
EXIT_VIOLATION = 6

SERIES_COLUMNS = ("level", "time", "mean_X", "std_X", "mean_Y", "std_Y", "mean_V", "std_V")
BENCH_COLUMNS = ("problem", "N", "status", "Y0", "oracle", "error", "iterations",
                 "contraction", "runtime_s")
DUMP_MAX_STEPS = 10


def exit_code(exc):
    if isinstance(exc, NonContractive):
        return EXIT_NONCONTRACTIVE
    if isinstance(exc, (PartitionExhausted, GridOutOfRange)):
        return EXIT_GLOBAL
    if isinstance(exc, (NonFinite, DomainError, MaxIterExceeded)):
        return EXIT_NUMERIC
    return EXIT_INVALID


def _status(exc):
    return {EXIT_NONCONTRACTIVE: "non-contractive", EXIT_GLOBAL: "global-failure",
            EXIT_NUMERIC: "numeric-error", EXIT_INVALID: "invalid"}[exit_code(exc)]


# --- output helpers ----------------------------------------------------------------

def _clean(obj):
    """JSON-safe copy: numpy scalars and arrays become Python values, non-finite -> None."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def write_atomic(path, text):
    """Write ``text`` to ``path`` through a temporary file and rename."""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_json(path, payload):
    write_atomic(path, json.dumps(_clean(payload), indent=2, sort_keys=True) + "\n")


def _csv_text(columns, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        w.writerow([repr(v) if isinstance(v, float) else v for v in row])
    return buf.getvalue()


def series(tree, X, Y, V):
    """Per-level mean and standard deviation of the first component of X, Y, V.

    Levels are equally weighted over nodes, which are equiprobable within a level.
    """
    cols = {c: [] for c in SERIES_COLUMNS}
    for k in range(tree.N + 1):
        cols["level"].append(k)
        cols["time"].append(float(tree.times[k]))
        for name, p in (("X", X), ("Y", Y), ("V", V)):
            vals = p.at(k)[:, 0]
            cols[f"mean_{name}"].append(float(np.mean(vals)))
            cols[f"std_{name}"].append(float(np.std(vals)))
    return cols


def _envelope(command, args, lp):
    out = {"schema": 1, "command": command, "problem": lp.doc if lp else None,
           "seed": args.seed,
           "versions": {"fdsys": __version__, "numpy": np.__version__,
                        "python": platform.python_version()}}
    return out


def _finish(args, report, started, extra_files=()):
    if not args.canonical:
        report["timing"] = {"started_utc": started[0],
                            "wall_clock_s": time.perf_counter() - started[1]}
    if args.out:
        write_json(os.path.join(args.out, "report.json"), report)
        for name, text in extra_files:
            write_atomic(os.path.join(args.out, name), text)


def _start():
    return (datetime.now(timezone.utc).isoformat(), time.perf_counter())


def _solution_outputs(tree, sol, args):
    X, V = sol.X, sol.V
    Y = sol.M.base - V
    cols = series(tree, X, Y, V)
    norms = {"X_S2": s2_norm(X), "Y_S2": s2_norm(Y), "V_S2": s2_norm(V),
             "M_S2": s2_norm(sol.M.base), "Z_H2": h2_norm(sol.M.Z)}
    rows = list(zip(*(cols[c] for c in SERIES_COLUMNS)))
    files = [("series.csv", _csv_text(SERIES_COLUMNS, rows))]
    if args.dump_nodes:
        files.append(("nodes.csv", _dump_nodes(tree, X, Y, V)))
    result = {"Y0": Y.at(0)[0], "X0": X.at(0)[0], "V_T_mean": np.mean(V.leaves, axis=0),
              "levels": tree.N, "dt": tree.dt}
    return result, {"columns": list(SERIES_COLUMNS), **cols}, norms, files


def _dump_nodes(tree, X, Y, V):
    cols = ["level", "node", "time"]
    cols += [f"X{i + 1}" for i in range(X.dim)] + [f"Y{i + 1}" for i in range(Y.dim)]
    cols += [f"V{i + 1}" for i in range(V.dim)]
    rows = []
    for k in range(tree.N + 1):
        for i in range(tree.size(k)):
            rows.append([k, i, float(tree.times[k])] + [float(v) for v in X.at(k)[i]]
                        + [float(v) for v in Y.at(k)[i]] + [float(v) for v in V.at(k)[i]])
    return _csv_text(cols, rows)


def _load(args):
    overrides = {"steps": args.steps, "T": args.T}
    if hasattr(args, "max_len"):
        overrides["max_len"] = args.max_len
        overrides["x_grid"] = args.x_grid
    lp = load(args.problem, **overrides)
    if args.dump_nodes and lp.steps > DUMP_MAX_STEPS:
        raise ValidationError(
            f"--dump-nodes needs at most {DUMP_MAX_STEPS} steps, got {lp.steps}")
    return lp


def _fail(args, report, started, exc):
    code = exit_code(exc)
    report["status"] = _status(exc)
    report["error"] = {"type": type(exc).__name__, "message": str(exc)}
    rep = getattr(exc, "report", None)
    if rep is not None and hasattr(rep, "to_dict"):
        report["picard"] = rep.to_dict()
    report["exit_code"] = code
    _finish(args, report, started)
    print(f"fdsys: {type(exc).__name__}: {exc}", file=sys.stderr)
    return code


# --- subcommands ---------------------------------------------------------------------

def cmd_solve_local(args):
    started = _start()
    report = {"schema": 1, "command": "solve-local"}
    try:
        lp = _load(args)
        report.update(_envelope("solve-local", args, lp))
        tree = build_tree(lp.T, lp.tau, lp.steps, lp.problem.m)
        sol, rep = solve_local(lp.problem, tree, lp.picard)
    except FdsError as exc:
        return _fail(args, report, started, exc)
    result, cols, norms, files = _solution_outputs(tree, sol, args)
    report.update({"status": "converged", "exit_code": EXIT_OK, "result": result,
                   "picard": rep.to_dict(),
                   "residuals": {"forward": rep.forward_residual,
                                 "backward": rep.backward_residual},
                   "norms": norms, "series": cols})
    _finish(args, report, started, files)
    print(f"converged in {rep.iterations} iterations; Y0 = {_fmt(result['Y0'])}")
    return EXIT_OK


def cmd_solve_global(args):
    started = _start()
    report = {"schema": 1, "command": "solve-global"}
    try:
        lp = _load(args)
        report.update(_envelope("solve-global", args, lp))
        tree = build_tree(lp.T, lp.tau, lp.steps, lp.problem.m)
        sol, grep = solve_global(lp.problem, tree, lp.global_cfg)
    except FdsError as exc:
        return _fail(args, report, started, exc)
    result, cols, norms, files = _solution_outputs(tree, sol, args)
    triple = to_fbsde_triple(lp.problem, tree, sol)
    report.update({"status": "converged", "exit_code": EXIT_OK, "result": result,
                   "global": grep.to_dict(),
                   "residuals": {"forward": forward_residual(lp.problem, tree, triple),
                                 "backward": backward_residual(lp.problem, tree, triple)},
                   "norms": norms, "series": cols})
    _finish(args, report, started, files)
    print(f"solved on {len(grep.partition) - 1} intervals; Y0 = {_fmt(result['Y0'])}; "
          f"max interface mismatch {max(grep.interface_mismatches, default=0.0):.3g}")
    return EXIT_OK


def cmd_check(args):
    started = _start()
    report = {"schema": 1, "command": "check"}
    selected = [n for n in ("a1", "a2", "l1", "ym") if getattr(args, n)]
    selected = selected or ["a1", "a2", "l1", "ym"]
    try:
        lp = _load(args)
        report.update(_envelope("check", args, lp))
        tree = build_tree(lp.T, lp.tau, lp.steps, lp.problem.m)
        P, seed = lp.problem, args.seed
        checks = {}
        if "a1" in selected:
            checks["A1"] = check_A1(P, tree, seed=seed).to_dict()
        if "a2" in selected:
            checks["A2"] = check_A2(P, tree, seed=seed).to_dict()
        if "l1" in selected:
            checks["L1"] = {slot: check_L1(op, tree, seed=seed).to_dict()
                            for slot, op in zip(("L1", "L2", "L3"), P.ops)}
        if "ym" in selected:
            if P.terminal.lipschitz is None:
                raise ValidationError("--ym needs a declared terminal Lipschitz constant")
            checks["YM"] = check_ym_lipschitz(tree, P.terminal, seed=seed, n=P.n).to_dict()
    except FdsError as exc:
        return _fail(args, report, started, exc)
    failed = []
    for name, rep in checks.items():
        if name == "L1":
            failed += [f"L1[{slot}]" for slot, r in rep.items() if not r["passed"]]
        elif not rep["passed"]:
            failed.append(name)
    code = EXIT_VIOLATION if failed else EXIT_OK
    report.update({"checks": checks, "failed": failed, "exit_code": code,
                   "status": "violation" if failed else "no violation found"})
    _finish(args, report, started)
    for name in checks:
        mark = "FAIL" if any(f.startswith(name) for f in failed) else "ok"
        print(f"{name}: {mark}")
    return code


def bench_rows(names=None, steps=(6, 8, 10, 12)):
    """One row per (builtin, N): solve status, Y0, oracle error, iterations, runtime."""
    rows = []
    for name in names or builtin_names():
        for N in steps:
            t0 = time.perf_counter()
            row = dict.fromkeys(BENCH_COLUMNS, "")
            row.update(problem=name, N=N)
            try:
                lp = load(f"builtin:{name}", steps=N)
                tree = build_tree(lp.T, lp.tau, lp.steps, lp.problem.m)
                sol, rep = solve_local(lp.problem, tree, lp.picard, residuals=False)
                y0 = float(sol.Y.at(0)[0, 0])
                oracle = oracle_y0(name, lp.doc)
                row.update(status="converged", Y0=y0, iterations=rep.iterations,
                           contraction="" if rep.contraction is None else rep.contraction)
                if oracle is not None:
                    row.update(oracle=oracle, error=abs(y0 - oracle))
            except (BudgetExceeded, InvalidGrid):
                row.update(status="skipped")
            except FdsError as exc:
                row.update(status=_status(exc))
                rep = getattr(exc, "report", None)
                if rep is not None:
                    row.update(iterations=rep.iterations)
            row["runtime_s"] = round(time.perf_counter() - t0, 3)
            rows.append(row)
    return rows


def cmd_bench(args):
    started = _start()
    names = None
    if args.problem:
        if not args.problem.startswith("builtin:"):
            print("fdsys: bench takes builtin:NAME", file=sys.stderr)
            return EXIT_INVALID
        names = [args.problem[len("builtin:"):]]
        builtin_document(names[0])
    rows = bench_rows(names)
    if args.canonical:
        for row in rows:
            row["runtime_s"] = ""
    text = _csv_text(BENCH_COLUMNS, [[row[c] for c in BENCH_COLUMNS] for row in rows])
    report = {"schema": 1, "command": "bench", "seed": args.seed, "rows": rows,
              "versions": {"fdsys": __version__, "numpy": np.__version__,
                           "python": platform.python_version()}}
    _finish(args, report, started, [("bench.csv", text)])
    sys.stdout.write(text)
    return EXIT_OK


def cmd_list_builtins(args):
    for name in builtin_names():
        print(f"{name}: {builtin_document(name)['description']}")
    return EXIT_OK


def _fmt(v):
    v = np.atleast_1d(v)
    return ", ".join(f"{x:.10g}" for x in v)


# --- argument parsing ------------------------------------------------------------

def _u64(text):
    v = int(text)
    if not 0 <= v < 2 ** 64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def build_parser():
    parser = argparse.ArgumentParser(prog="fdsys", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"fdsys {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, problem_required=True):
        if problem_required:
            p.add_argument("problem", help="problem JSON file or builtin:NAME")
        p.add_argument("--out", help="directory for report files")
        p.add_argument("--seed", type=_u64, default=0)
        p.add_argument("--canonical", action="store_true",
                       help="omit timing so reports are byte-identical across runs")

    def horizon(p):
        p.add_argument("--steps", type=int, help="number of tree steps N")
        p.add_argument("--T", type=float, help="terminal time")
        p.add_argument("--dump-nodes", action="store_true",
                       help=f"also write nodes.csv (N <= {DUMP_MAX_STEPS})")

    p = sub.add_parser("solve-local", help="Picard solve on the whole horizon")
    common(p)
    horizon(p)
    p.set_defaults(func=cmd_solve_local)

    p = sub.add_parser("solve-global", help="stitched solve over a partition of the horizon")
    common(p)
    horizon(p)
    p.add_argument("--max-len", type=float, help="maximal interval length")
    p.add_argument("--x-grid", type=float, nargs=3, metavar=("LO", "HI", "G"),
                   help="x-grid for the terminal maps")
    p.set_defaults(func=cmd_solve_global)

    p = sub.add_parser("check", help="sampled assumption checks")
    common(p)
    horizon(p)
    for flag, text in (("--a1", "coefficient Lipschitz/monotonicity (A1)"),
                       ("--a2", "sign condition for arbitrary horizons (A2)"),
                       ("--l1", "operator Lipschitz catalogue (L1)"),
                       ("--ym", "Lipschitz estimates of M and Y")):
        p.add_argument(flag, action="store_true", help=text)
    p.set_defaults(func=cmd_check, dump_nodes=False)

    p = sub.add_parser("bench", help="run the builtins for N in 6, 8, 10, 12")
    common(p, problem_required=False)
    p.add_argument("problem", nargs="?", help="restrict to one builtin:NAME")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("list-builtins", help="list built-in problems")
    p.set_defaults(func=cmd_list_builtins)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "solve-global" and args.x_grid is not None:
        lo, hi, G = args.x_grid
        if G != int(G):
            parser.error("--x-grid G must be an integer")
        args.x_grid = (lo, hi, int(G))
    try:
        return args.func(args)
    except FdsError as exc:
        print(f"fdsys: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exit_code(exc)


if __name__ == "__main__":
    sys.exit(main())
