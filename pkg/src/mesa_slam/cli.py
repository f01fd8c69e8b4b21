"""Experiment driver: ``mesa-slam {generate,run,compare,bench}``.

Exit codes: 0 converged (or baseline solved), 3 communication budget or
schedule exhausted before convergence, 4 solver failure, 5 bad input
(unreadable / malformed files, invalid configuration).  argparse uses 2 for
usage errors.
"""

from __future__ import annotations

import argparse
import configparser
import dataclasses
import sys
from pathlib import Path

from . import __version__
from .baselines import centralized, independent
from .datasets import (
    InvalidConfig,
    MultiRobotProblem,
    ParseError,
    SyntheticConfig,
    generate,
    load_g2o,
    load_partition_file,
    load_problem,
    partition,
    save_problem,
)
from .factorgraph import BearingRangeFactor, RangeFactor, SolverError
from .manifold import AngleNearPi
from .mesa import StopCriteria, build_team, default_hyperparameters, variant_config
from .metrics import (
    EmptyTrace,
    MissingCopy,
    convergence_point,
    format_number,
    write_summary_csv,
)
from .netsim import (
    TRACE_SCHEMA,
    TraceFormatError,
    communication_budget,
    events_for_budget,
    execute,
    generate_schedule,
    read_trace_csv,
    team_edges,
    write_trace_csv,
)

EXIT_OK = 0
EXIT_BUDGET = 3
EXIT_SOLVER = 4
EXIT_INPUT = 5

MESA_METHODS = ("geodesic", "split", "apx-geo", "chordal")
METHODS = MESA_METHODS + ("centralized", "independent")
MANIFEST_NAME = "{method}.manifest.ini"
TRACE_NAME = "{method}.trace.csv"
SUMMARY_NAME = "{method}.summary.csv"


class UsageError(ValueError):
    pass


# --------------------------------------------------------------------------
# config files


def _convert(text: str, default):
    if isinstance(default, bool):
        low = text.strip().lower()
        if low not in ("true", "false", "1", "0", "yes", "no"):
            raise InvalidConfig(f"not a boolean: {text!r}")
        return low in ("true", "1", "yes")
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        return float(text)
    return text.strip()


def read_config(path) -> configparser.ConfigParser:
    cp = configparser.ConfigParser()
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise FileNotFoundError(f"config file {path} not found")
        cp.read(path)
    return cp


def synthetic_config(cp: configparser.ConfigParser) -> SyntheticConfig:
    cfg = SyntheticConfig()
    if not cp.has_section("synthetic"):
        return cfg
    fields = {f.name: f for f in dataclasses.fields(SyntheticConfig)}
    updates = {}
    for key, text in cp.items("synthetic"):
        if key not in fields:
            raise InvalidConfig(f"unknown [synthetic] option {key!r}")
        try:
            if key == "odometry_probs":
                updates[key] = tuple(float(x) for x in text.split(","))
            elif key == "proximity":
                updates[key] = None if text.strip().lower() == "none" else float(text)
            else:
                updates[key] = _convert(text, getattr(cfg, key))
        except ValueError as exc:
            raise InvalidConfig(f"[synthetic] {key}: {exc}") from None
    return dataclasses.replace(cfg, **updates)


def _opt(cp, section, key, conv, default):
    if cp.has_option(section, key):
        try:
            return conv(cp.get(section, key))
        except ValueError as exc:
            raise InvalidConfig(f"[{section}] {key}: {exc}") from None
    return default


def _parse_outages(text: str) -> dict:
    """``0-1:10:20, 1-2:0:5`` -> {(0, 1): [(10, 20)], (1, 2): [(0, 5)]}."""
    out: dict = {}
    for item in filter(None, (s.strip() for s in text.split(","))):
        edge, a, b = item.split(":")
        i, j = edge.split("-")
        out.setdefault((int(i), int(j)), []).append((int(a), int(b)))
    return out


# --------------------------------------------------------------------------
# commands


def cmd_generate(args) -> int:
    cfg = synthetic_config(read_config(args.config))
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    problem = generate(cfg)
    save_problem(problem, args.out)
    n_inter = sum(problem.is_inter_robot(f) for f in problem.all_factors())
    print(
        f"seed={cfg.seed} robots={len(problem.robots)} variables={len(problem.home)} "
        f"factors={len(problem.all_factors())} inter_robot={n_inter} edges={len(problem.edges)}"
    )
    return EXIT_OK


def _profile_for(problem: MultiRobotProblem) -> str:
    measured = (RangeFactor, BearingRangeFactor)
    return "range" if any(isinstance(f, measured) for f in problem.all_factors()) else "pose"


def _run_problem(problem: MultiRobotProblem, args, cp, profile: str, extra: dict | None = None) -> int:
    method = args.method or _opt(cp, "mesa", "method", str, "geodesic")
    if method not in METHODS:
        raise UsageError(f"unknown method {method!r}; choose from {', '.join(METHODS)}")
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    profile = _opt(cp, "mesa", "profile", str, profile) if args.profile is None else args.profile
    dataset = problem.name or "problem"
    manifest = {"dataset": dataset, "method": method}
    meta = {"dataset": dataset, "method": method}

    if method in ("centralized", "independent"):
        if method == "centralized":
            r2 = centralized(problem).residual
        else:
            r2 = independent(problem).r2_mean
        trace = [_BaselineSample(r2)]
        meta.update(beta0="", alpha="")
        manifest.update(extra or {})
        manifest["r2_mean_final"] = repr(r2)
        _write_outputs(out_dir, method, trace, meta, manifest, dataset, None, None)
        print(f"{method}: r2_mean={r2!r}")
        return EXIT_OK

    beta0_d, alpha_d = default_hyperparameters(method, profile)
    beta0 = args.beta0 if args.beta0 is not None else _opt(cp, "mesa", "beta0", float, beta0_d)
    alpha = args.alpha if args.alpha is not None else _opt(cp, "mesa", "alpha", float, alpha_d)
    dual_mode = _opt(cp, "mesa", "dual_mode", str, "theta")
    config = variant_config(method, profile, beta0=beta0, alpha=alpha, dual_mode=dual_mode)

    robots = build_team(problem.factors, problem.initial, config)
    edges = team_edges(robots)
    mode = args.schedule or _opt(cp, "schedule", "mode", str, "round-robin")
    drop = args.drop_prob if args.drop_prob is not None else _opt(cp, "schedule", "drop_prob", float, 0.0)
    seed = args.seed if args.seed is not None else _opt(cp, "schedule", "seed", int, 0)
    budget = args.budget if args.budget is not None else _opt(
        cp, "schedule", "budget", int, communication_budget(len(edges), len(robots))
    )
    outages = _opt(cp, "schedule", "outages", _parse_outages, {})
    gap_tol = args.gap_tol if args.gap_tol is not None else _opt(cp, "stop", "gap_tol", float, StopCriteria.gap_tol)
    n_events = _opt(cp, "schedule", "events", int, events_for_budget(budget, drop))

    manifest.update(
        profile=profile,
        beta0=format_number(beta0),
        alpha=format_number(alpha),
        dual_mode=dual_mode,
        schedule=mode,
        drop_prob=format_number(drop),
        seed=str(seed),
        budget=str(budget),
        events=str(n_events),
        gap_tol=format_number(gap_tol),
        robots=str(len(robots)),
        edges=str(len(edges)),
    )
    manifest.update(extra or {})
    meta.update(beta0=format_number(beta0), alpha=format_number(alpha), schedule=mode,
                drop_prob=format_number(drop), seed=seed)
    if not edges:
        raise UsageError("problem has no shared variables: nothing to communicate")
    schedule = generate_schedule(edges, n_events, mode, drop, outages, seed)
    trace = execute(robots, schedule, config, StopCriteria(budget, gap_tol))
    if not len(trace):
        raise EmptyTrace("no events were executed")
    manifest.update(status=trace.status, communications=str(trace.communications),
                    r2_mean_final=repr(trace.final_r2))
    _write_outputs(out_dir, method, trace, meta, manifest, dataset, beta0, alpha)
    print(f"{method}: status={trace.status} communications={trace.communications} r2_mean={trace.final_r2!r}")
    return EXIT_OK if trace.status == "converged" else EXIT_BUDGET


@dataclasses.dataclass(frozen=True)
class _BaselineSample:
    r2_mean: float
    event_index: int = 0
    edge: tuple = (0, 0)
    executed: bool = False
    communications: int = 0
    max_gap: float = 0.0


def _write_outputs(out_dir, method, trace, meta, manifest, dataset, beta0, alpha):
    write_trace_csv(trace, out_dir / TRACE_NAME.format(method=method), meta)
    comms, _ = convergence_point(trace)
    write_summary_csv(
        [dict(dataset=dataset, method=method, beta0=beta0, alpha=alpha,
              communications_at_convergence=comms, r2_mean_final=trace[-1].r2_mean)],
        out_dir / SUMMARY_NAME.format(method=method),
    )
    cp = configparser.ConfigParser()
    cp["run"] = {k: str(v) for k, v in manifest.items()}
    with (out_dir / MANIFEST_NAME.format(method=method)).open("w") as fh:
        fh.write(f"# mesa-slam {__version__} run manifest\n")
        cp.write(fh)


def cmd_run(args) -> int:
    cp = read_config(args.config)
    problem = load_problem(args.problem)
    return _run_problem(problem, args, cp, _profile_for(problem))


def cmd_bench(args) -> int:
    cp = read_config(args.config)
    graph, values = load_g2o(args.g2o)
    assignment = None
    if args.partition_file:
        assignment = load_partition_file(args.partition_file, values)
    name = Path(args.g2o).stem
    problem = partition(graph, values, args.parts, assignment, name=name)
    cent = centralized(problem)
    extra = {"parts": str(len(problem.robots)), "centralized_residual": repr(cent.residual)}
    print(f"{name}: {len(values)} vertices, {len(graph)} factors, centralized residual {cent.residual!r}")
    return _run_problem(problem, args, cp, "benchmark", extra)


def cmd_compare(args) -> int:
    paths = []
    for p in map(Path, args.traces):
        if p.is_dir():
            paths.extend(sorted(q for q in p.glob("*.csv") if _is_trace(q)))
        else:
            paths.append(p)
    if not paths:
        raise EmptyTrace("no trace files found")
    rows = []
    for p in paths:
        samples, meta = read_trace_csv(p)
        comms, _ = convergence_point(samples)
        rows.append(
            dict(
                dataset=meta.get("dataset", p.stem),
                method=meta.get("method", p.stem),
                beta0=float(meta["beta0"]) if meta.get("beta0") else None,
                alpha=float(meta["alpha"]) if meta.get("alpha") else None,
                communications_at_convergence=comms,
                r2_mean_final=samples[-1].r2_mean,
            )
        )
    write_summary_csv(rows, args.out)
    for r in rows:
        print(f"{r['dataset']} {r['method']}: converged at {r['communications_at_convergence']} "
              f"communications, r2_mean={r['r2_mean_final']!r}")
    return EXIT_OK


def _is_trace(path: Path) -> bool:
    with path.open() as fh:
        return fh.readline().strip() == TRACE_SCHEMA


# --------------------------------------------------------------------------
# argument parsing


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--method", choices=METHODS, help="default: geodesic")
    p.add_argument("--kind", dest="method", choices=METHODS, help="alias of --method")
    p.add_argument("--config", help="INI file with [mesa], [schedule], [stop] sections")
    p.add_argument("--out-dir", default=".", help="directory for trace, summary and manifest")
    p.add_argument("--beta0", type=float)
    p.add_argument("--alpha", type=float)
    p.add_argument("--profile", choices=("pose", "range", "benchmark"),
                   help="hyper-parameter defaults (inferred from the problem if omitted)")
    p.add_argument("--drop-prob", type=float)
    p.add_argument("--budget", type=int, help="max communications (default 500*|E|*|R|)")
    p.add_argument("--schedule", choices=("round-robin", "random"))
    p.add_argument("--seed", type=int, help="schedule seed")
    p.add_argument("--gap-tol", type=float, help="stop once every shared copy agrees to this tolerance")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mesa-slam", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic multi-robot problem")
    g.add_argument("--config", help="INI file with a [synthetic] section")
    g.add_argument("--seed", type=int)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_generate)

    r = sub.add_parser("run", help="solve a problem file with one method")
    r.add_argument("problem")
    _add_run_flags(r)
    r.set_defaults(func=cmd_run)

    c = sub.add_parser("compare", help="summarize trace CSVs")
    c.add_argument("traces", nargs="+", help="trace files or directories of them")
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_compare)

    b = sub.add_parser("bench", help="partition a g2o benchmark and run a method on it")
    b.add_argument("g2o")
    b.add_argument("--parts", type=int, default=5)
    b.add_argument("--partition-file")
    _add_run_flags(b)
    b.set_defaults(func=cmd_bench, profile=None)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (AngleNearPi, SolverError) as exc:
        print(f"mesa-slam: solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except (InvalidConfig, ParseError, TraceFormatError, EmptyTrace, MissingCopy, UsageError,
            OSError, ValueError, KeyError) as exc:
        print(f"mesa-slam: error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
