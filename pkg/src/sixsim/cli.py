"""Command-line front end: ``sixsim <verb> ...``.

Exit codes: 0 success, 1 usage or bad input, 2 invariant violation, 3 I/O error.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import math
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence

from . import analytics
from .config import ConfigError, ScenarioConfig, load_scenario, validate
from .engine import InvariantViolation, topology_for
from .metrics import SUMMARY_FIELDS, read_csv, summary_row, write_csv, write_run

EXIT_OK, EXIT_USAGE, EXIT_INVARIANT, EXIT_IO = 0, 1, 2, 3
PSUCCESS_TOLERANCE = 0.005


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _int_list(text: str) -> List[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _float_list(text: str) -> List[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


# ---------------------------------------------------------------- psuccess

def cmd_psuccess(args, out) -> int:
    c = args.c
    ks = args.k or [5]
    if c < 1 or any(k < 1 for k in ks):
        raise UsageError("--c and --k must be positive")
    if args.sweep:
        if args.step < 1:
            raise UsageError("--step must be positive")
        grid = list(range(0, c + 1, args.step))
        if grid[-1] != c:
            grid.append(c)
        fas = fbs = grid
    else:
        if args.fa is None or args.fb is None:
            raise UsageError("give --fa and --fb, or --sweep")
        if not (0 <= args.fa <= c and 0 <= args.fb <= c):
            raise UsageError("free counts must lie in [0, C]")
        fas, fbs = [args.fa], [args.fb]
    exact = analytics.psuccess_grid(fas, fbs, c, ks)
    mc = None
    if args.verify:
        mc = analytics.psuccess_monte_carlo_grid(fas, fbs, c, ks, trials=args.trials, seed=args.seed)
    if not args.sweep and not args.verify:
        print(f"{exact[(fas[0], fbs[0], ks[0])]:.4f}", file=out)
        return EXIT_OK
    w = csv.writer(out, lineterminator="\n")
    header = ["free_a", "free_b", "total", "k", "p_success"]
    if mc is not None:
        header += ["p_monte_carlo", "abs_diff"]
    w.writerow(header)
    worst = 0.0
    for k in ks:
        for a in fas:
            for b in fbs:
                row = [a, b, c, k, f"{exact[(a, b, k)]:.6f}"]
                if mc is not None:
                    d = abs(exact[(a, b, k)] - mc[(a, b, k)])
                    worst = max(worst, d)
                    row += [f"{mc[(a, b, k)]:.6f}", f"{d:.6f}"]
                w.writerow(row)
    if mc is not None:
        print(f"max |diff| = {worst:.6f}", file=sys.stderr)
        if worst >= PSUCCESS_TOLERANCE:
            return EXIT_INVARIANT
    return EXIT_OK


# ---------------------------------------------------------------- run

def _plan_from_args(args) -> analytics.ExperimentPlan:
    if args.plan:
        plan = analytics.load_plan(args.plan)
    else:
        plan = analytics.ExperimentPlan()
        if args.config:
            plan.base = load_scenario(args.config)
    if args.nodes:
        plan.n_nodes = args.nodes
    if args.period:
        plan.periods = args.period
    if args.mode:
        m = args.mode.upper()
        if m not in ("MSF", "PB", "BOTH"):
            raise UsageError("--mode must be MSF, PB or both")
        plan.modes = ["MSF", "PB"] if m == "BOTH" else [m]
    if args.seed:
        plan.seeds = analytics._seed_range(args.seed)
    if args.duration is not None:
        plan.base = dataclasses.replace(plan.base, duration_minutes=args.duration)
    return plan


def cmd_run(args, out) -> int:
    plan = _plan_from_args(args)
    configs = plan.configs()
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    results = analytics.run_configs(configs, args.jobs)
    rows = []
    for res in results:
        write_run(res, out_dir / analytics.run_dir_name(res.config))
        rows.append(summary_row(res))
    write_csv(out_dir / "summary.csv", SUMMARY_FIELDS, rows)
    print(f"{len(rows)} runs written to {out_dir}", file=out)
    return EXIT_OK


# ---------------------------------------------------------------- summarize

def _fmt(x: float) -> str:
    return "nan" if math.isnan(x) else f"{x:.6g}"


def summarize_rows(rows: Sequence[dict], metric: str, group_by: Sequence[str]):
    """Per-group statistics of ``metric``; blank cells are skipped, outliers kept."""
    groups: Dict[tuple, List[float]] = {}
    for r in rows:
        if metric not in r:
            raise UsageError(f"no column {metric!r} in the input")
        key = tuple(r.get(g, "") for g in group_by)
        vals = groups.setdefault(key, [])
        v = r[metric]
        if v not in ("", None):
            vals.append(float(v))
    return [(key, analytics.describe(vals), vals) for key, vals in sorted(groups.items())]


def write_dat(path: Path, group_by: Sequence[str], table) -> None:
    """Gnuplot-style CDF blocks, one per group, separated by two blank lines."""
    with open(path, "w") as fh:
        for i, (key, _, vals) in enumerate(table):
            if i:
                fh.write("\n\n")
            label = " ".join(f"{g}={k}" for g, k in zip(group_by, key)) or "all"
            fh.write(f"# {label}\n")
            for x, f in analytics.ecdf(vals):
                fh.write(f"{x:.6g} {f:.6g}\n")


def cmd_summarize(args, out) -> int:
    rows: List[dict] = []
    for p in args.inputs:
        rows.extend(read_csv(p))
    group_by = [g for g in (args.group_by or "").split(",") if g]
    for g in group_by:
        if rows and g not in rows[0]:
            raise UsageError(f"no column {g!r} in the input")
    table = summarize_rows(rows, args.metric, group_by)
    w = csv.writer(out, lineterminator="\n")
    w.writerow(group_by + ["n", "mean", "median", "p5", "p95"])
    for key, st, _ in table:
        w.writerow(list(key) + [st.n, _fmt(st.mean), _fmt(st.median), _fmt(st.p5), _fmt(st.p95)])
    if args.dat:
        write_dat(Path(args.dat), group_by, table)
    return EXIT_OK


# ---------------------------------------------------------------- topology / config

def cmd_topo_dump(args, out) -> int:
    cfg = load_scenario(args.config) if args.config else ScenarioConfig()
    cfg = validate(dataclasses.replace(cfg, n_nodes=args.nodes or cfg.n_nodes,
                                       rng_seed=cfg.rng_seed if args.seed is None else args.seed))
    topo = topology_for(cfg)
    topo.dump_csv(args.out or out)
    print(f"digest {topo.digest()}", file=sys.stderr)
    return EXIT_OK


def cmd_validate_config(args, out) -> int:
    cfg = load_scenario(args.file)
    print(f"ok: {cfg.stack_mode} n={cfg.n_nodes} period={cfg.app_period_seconds:g}s "
          f"duration={cfg.duration_minutes:g}min", file=out)
    return EXIT_OK


# ---------------------------------------------------------------- entry point

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="sixsim", description="6TiSCH simulator with MSF and cross-layer PB scheduling")
    sub = p.add_subparsers(dest="verb", required=True, parser_class=_Parser)

    ps = sub.add_parser("psuccess", help="first-attempt reservation success probability")
    ps.add_argument("--fa", type=int, help="free cells at the requester")
    ps.add_argument("--fb", type=int, help="free cells at the responder")
    ps.add_argument("--c", type=int, default=100, help="cells per slotframe")
    ps.add_argument("--k", type=int, action="append", help="proposed cells (repeatable)")
    ps.add_argument("--sweep", action="store_true", help="emit the whole grid as CSV")
    ps.add_argument("--step", type=int, default=10)
    ps.add_argument("--verify", action="store_true", help="cross-check against Monte Carlo")
    ps.add_argument("--trials", type=int, default=1_000_000)
    ps.add_argument("--seed", type=int, default=0)
    ps.set_defaults(func=cmd_psuccess)

    rn = sub.add_parser("run", help="run a plan or a single scenario family")
    rn.add_argument("--plan", help="plan file")
    rn.add_argument("--config", help="scenario file used as the template")
    rn.add_argument("--nodes", type=_int_list)
    rn.add_argument("--period", type=_float_list)
    rn.add_argument("--mode", help="MSF, PB or both")
    rn.add_argument("--seed", help="seed list or range, e.g. 1-20")
    rn.add_argument("--duration", type=float, help="minutes")
    rn.add_argument("--jobs", type=int, help="parallel runs (default: SIXSIM_THREADS or CPU count)")
    rn.add_argument("--out", required=True)
    rn.set_defaults(func=cmd_run)

    sm = sub.add_parser("summarize", help="group statistics over CSV outputs")
    sm.add_argument("inputs", nargs="+")
    sm.add_argument("--metric", required=True)
    sm.add_argument("--group-by", help="comma-separated columns")
    sm.add_argument("--dat", help="write CDF points for plotting")
    sm.set_defaults(func=cmd_summarize)

    td = sub.add_parser("topo-dump", help="generate and print a topology")
    td.add_argument("--config", help="scenario file supplying area and topology knobs")
    td.add_argument("--nodes", type=int)
    td.add_argument("--seed", type=int)
    td.add_argument("--out")
    td.set_defaults(func=cmd_topo_dump)

    vc = sub.add_parser("validate-config", help="parse and check a scenario file")
    vc.add_argument("file")
    vc.set_defaults(func=cmd_validate_config)
    return p


def main(argv: Optional[Sequence[str]] = None, out=None) -> int:
    out = out or sys.stdout
    args = build_parser().parse_args(argv)
    try:
        return args.func(args, out)
    except (UsageError, ConfigError, ValueError) as exc:
        print(f"sixsim: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except InvariantViolation as exc:
        print(f"sixsim: invariant violated: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    except OSError as exc:
        print(f"sixsim: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
