"""Edge-based communication simulator.

Only one robot pair communicates per event.  Message loss and link outages
are modelled as events that do not execute: they stay in the schedule (and
the trace) flagged as skipped.
"""

from __future__ import annotations

import csv
import math
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .mesa import MesaConfig, StopCriteria, Trace, TraceSample, max_gap, mesa_edge_step, run

TRACE_COLUMNS = ("event_index", "edge", "executed", "communications", "r2_mean", "max_gap")
TRACE_SCHEMA = "# schema: mesa-trace/1"
BUDGET_PER_EDGE_ROBOT = 500


class EmptyEdgeSet(ValueError):
    pass


class TraceFormatError(ValueError):
    pass


@dataclass(frozen=True)
class Event:
    index: int
    edge: tuple
    executed: bool = True


@dataclass
class NetworkSchedule:
    events: list
    edges: list
    mode: str = "round-robin"
    drop_prob: float = 0.0
    # edge -> list of half-open [start, stop) event-index windows
    outages: dict = field(default_factory=dict)
    seed: int | None = None

    def __iter__(self):
        return iter(self.events)

    def __len__(self):
        return len(self.events)

    @property
    def executed(self) -> list:
        return [e for e in self.events if e.executed]


def _normalize_edge(e) -> tuple:
    i, j = (int(x) for x in e)
    if i == j:
        raise ValueError(f"self-loop edge ({i}, {j})")
    return (i, j) if i < j else (j, i)


def generate_schedule(edges: Iterable, n_events: int, mode: str = "round-robin",
                      drop_prob: float = 0.0, outages: dict | None = None,
                      seed: int | None = 0) -> NetworkSchedule:
    """Deterministic (given ``seed``) sequence of ``n_events`` communication attempts.

    ``round-robin`` cycles the sorted edge list; ``random`` draws edges
    uniformly.  Each event is then dropped with probability ``drop_prob``, and
    events falling in an outage window of their edge are skipped.
    """
    edges = sorted({_normalize_edge(e) for e in edges})
    if not edges:
        raise EmptyEdgeSet("no communication edges")
    if not 0 <= drop_prob < 1:
        raise ValueError("drop_prob must lie in [0, 1)")
    if mode not in ("round-robin", "random"):
        raise ValueError(f"unknown schedule mode {mode!r}")
    outages = {_normalize_edge(e): list(w) for e, w in (outages or {}).items()}
    rng = np.random.default_rng(seed)
    if mode == "round-robin":
        picks = np.arange(n_events) % len(edges)
    else:
        picks = rng.integers(len(edges), size=n_events)
    drops = rng.random(n_events) < drop_prob if drop_prob > 0 else np.zeros(n_events, bool)
    events = []
    for n in range(n_events):
        edge = edges[int(picks[n])]
        down = any(a <= n < b for a, b in outages.get(edge, ()))
        events.append(Event(n, edge, not (drops[n] or down)))
    return NetworkSchedule(events, edges, mode, drop_prob, outages, seed)


def communication_budget(n_edges: int, n_robots: int) -> int:
    return BUDGET_PER_EDGE_ROBOT * n_edges * n_robots


def events_for_budget(budget: int, drop_prob: float = 0.0) -> int:
    """Enough attempts that ``budget`` deliveries are almost surely reachable despite drops."""
    mean = budget / (1.0 - drop_prob)
    return int(math.ceil(mean + 6 * math.sqrt(mean) + 10))


@dataclass
class CommCounter:
    total: int = 0
    per_edge: Counter = field(default_factory=Counter)

    def record(self, edge) -> None:
        self.per_edge[_normalize_edge(edge)] += 1
        self.total += 1

    @classmethod
    def from_trace(cls, trace) -> "CommCounter":
        c = cls()
        for s in trace:
            if s.executed:
                c.record(s.edge)
        return c


def team_edges(robots: dict) -> list[tuple]:
    return sorted({_normalize_edge((i, j)) for i, r in robots.items() for j in r.neighbors})


def _disjoint_batches(events: Sequence[Event]):
    """Greedy runs of consecutive executed events with no robot in common."""
    batch, busy = [], set()
    for ev in events:
        if ev.executed and busy.isdisjoint(ev.edge):
            batch.append(ev)
            busy.update(ev.edge)
            continue
        if batch:
            yield batch
        if ev.executed:
            batch, busy = [ev], set(ev.edge)
        else:
            yield [ev]
            batch, busy = [], set()
    if batch:
        yield batch


def execute(robots: dict, schedule, config: MesaConfig, stop: StopCriteria | None = None,
            evaluator=None, workers: int = 1, on_step=None) -> Trace:
    """Run MESA over a schedule.

    With ``workers > 1`` consecutive vertex-disjoint events are solved
    concurrently; since they touch disjoint robots the result equals the
    sequential interleaving, which is what the trace records.
    """
    if workers <= 1:
        return run(robots, schedule, config, stop, evaluator, on_step)
    from .metrics import MeanResidualEvaluator

    stop = stop or StopCriteria()
    evaluator = evaluator or MeanResidualEvaluator.for_robots(robots)
    events = list(schedule)
    trace = Trace()
    # isolated robots are handled by the sequential path's prologue
    run(robots, [], config, stop, evaluator)
    comms = 0
    with ThreadPoolExecutor(workers) as pool:
        for batch in _disjoint_batches(events):
            if stop.max_communications is not None:
                room = stop.max_communications - comms
                if room <= 0:
                    trace.status = "budget"
                    return trace
                batch = batch[:room] if batch[0].executed else batch
            todo = [e for e in batch if e.executed]
            list(pool.map(lambda e: mesa_edge_step(robots[e.edge[0]], robots[e.edge[1]], config), todo))
            values = {k: r.values for k, r in robots.items()}
            r2 = evaluator(values)
            gap = max_gap(robots, config)
            for e in batch:
                trace.attempts += 1
                comms += int(e.executed)
                trace.samples.append(TraceSample(e.index, e.edge, e.executed, comms, r2, gap))
                if on_step is not None:
                    on_step(trace.samples[-1])
            if todo and gap < stop.gap_tol:
                trace.status = "converged"
                return trace
    if stop.max_communications is not None and comms >= stop.max_communications:
        trace.status = "budget"
    return trace


# --------------------------------------------------------------------------
# trace CSV


def write_trace_csv(trace, path, metadata: dict | None = None) -> None:
    """Trace CSV with a versioned schema line and ``# key: value`` metadata lines."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        fh.write(TRACE_SCHEMA + "\n")
        for k, v in (metadata or {}).items():
            fh.write(f"# {k}: {v}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRACE_COLUMNS)
        for s in trace:
            w.writerow(
                [s.event_index, f"{s.edge[0]}-{s.edge[1]}", int(s.executed), s.communications,
                 repr(float(s.r2_mean)), repr(float(s.max_gap))]
            )


def read_trace_csv(path) -> tuple[list[TraceSample], dict]:
    path = Path(path)
    meta: dict = {}
    rows = []
    with path.open(newline="") as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0].strip() != TRACE_SCHEMA:
        raise TraceFormatError(f"{path}: missing or unknown schema line")
    body = []
    for ln in lines[1:]:
        if ln.startswith("#"):
            k, _, v = ln[1:].partition(":")
            meta[k.strip()] = v.strip()
        elif ln.strip():
            body.append(ln)
    reader = csv.reader(body)
    header = next(reader, None)
    if tuple(header or ()) != TRACE_COLUMNS:
        raise TraceFormatError(f"{path}: unexpected columns {header}")
    for n, rec in enumerate(reader, 2):
        try:
            a, b = rec[1].split("-")
            rows.append(
                TraceSample(int(rec[0]), (int(a), int(b)), bool(int(rec[2])), int(rec[3]),
                            float(rec[4]), float(rec[5]))
            )
        except (ValueError, IndexError) as exc:
            raise TraceFormatError(f"{path}: data row {n}: {exc}") from None
    return rows, meta
