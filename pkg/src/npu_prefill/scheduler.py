"""Two-processor (NPU + CPU) subgraph scheduling.

Node ``(i, j)`` is stage ``j`` of chunk ``i``. Attention-like stages depend on
stage ``j - 1`` of every chunk up to and including ``i`` (they read the KV of
earlier chunks); every other stage depends only on stage ``j - 1`` of its own
chunk. Each processor runs one node at a time without preemption.

Time is integer simulated units throughout.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

NPU = "NPU"
CPU = "CPU"
PROCESSORS = (NPU, CPU)
CROSS_CHUNK_KINDS = frozenset({"attention", "dynamic"})
SCHEMA_VERSION = 1

Node = tuple[int, int]


class ScheduleError(RuntimeError):
    pass


class InstanceTooLarge(ValueError):
    pass


@dataclass(frozen=True)
class SubgraphNode:
    chunk: int
    stage: int
    processor: str
    duration: int

    def __post_init__(self):
        if self.processor not in PROCESSORS:
            raise ValueError(f"unknown processor {self.processor!r}")
        if not self.duration > 0:
            raise ValueError(f"duration of {(self.chunk, self.stage)} must be positive, got {self.duration}")

    @property
    def key(self) -> Node:
        return (self.chunk, self.stage)


@dataclass
class DependencyGraph:
    num_chunks: int
    num_stages: int
    stage_kinds: tuple[str, ...]
    preds: dict[Node, tuple[Node, ...]]
    succs: dict[Node, tuple[Node, ...]]

    @property
    def nodes(self) -> list[Node]:
        return [(i, j) for i in range(self.num_chunks) for j in range(self.num_stages)]

    def edges(self) -> set[tuple[Node, Node]]:
        return {(p, n) for n, ps in self.preds.items() for p in ps}


def build_dependencies(num_chunks: int, num_stages: int, stage_kinds: Sequence[str]) -> DependencyGraph:
    if num_chunks < 1 or num_stages < 1:
        raise ValueError("need at least one chunk and one stage")
    if len(stage_kinds) != num_stages:
        raise ValueError(f"expected {num_stages} stage kinds, got {len(stage_kinds)}")
    preds: dict[Node, tuple[Node, ...]] = {}
    succs: dict[Node, list[Node]] = {(i, j): [] for i in range(num_chunks) for j in range(num_stages)}
    for i in range(num_chunks):
        for j in range(num_stages):
            if j == 0:
                ps: tuple[Node, ...] = ()
            elif stage_kinds[j] in CROSS_CHUNK_KINDS:
                ps = tuple((k, j - 1) for k in range(i + 1))
            else:
                ps = ((i, j - 1),)
            preds[(i, j)] = ps
            for p in ps:
                succs[p].append((i, j))
    return DependencyGraph(num_chunks, num_stages, tuple(stage_kinds), preds, {k: tuple(v) for k, v in succs.items()})


@dataclass(frozen=True)
class Event:
    chunk: int
    stage: int
    processor: str
    start: int
    end: int

    @property
    def key(self) -> Node:
        return (self.chunk, self.stage)


@dataclass
class ScheduleReport:
    policy: str
    events: list[Event]
    makespan: int
    busy: dict[str, int]

    @property
    def bubble_rate(self) -> float:
        """Fraction of the makespan during which the NPU sits idle."""
        if self.makespan == 0:
            return 0.0
        return 1.0 - self.busy[NPU] / self.makespan

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "policy": self.policy,
            "makespan": self.makespan,
            "busy": dict(self.busy),
            "bubble_rate": self.bubble_rate,
            "events": [
                {"chunk": e.chunk, "stage": e.stage, "processor": e.processor, "start": e.start, "end": e.end}
                for e in self.events
            ],
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "ScheduleReport":
        if d.get("schema_version") != SCHEMA_VERSION:
            raise ValueError(f"unsupported schedule schema_version {d.get('schema_version')!r}")
        events = [Event(e["chunk"], e["stage"], e["processor"], e["start"], e["end"]) for e in d["events"]]
        return cls(d["policy"], events, int(d["makespan"]), {k: int(v) for k, v in d["busy"].items()})

    def write_json(self, path) -> None:
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)
            f.write("\n")

    def write_gantt_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["node", "processor", "start", "end"])
            for e in sorted(self.events, key=lambda e: (e.start, e.processor)):
                w.writerow([f"G{e.chunk}_{e.stage}", e.processor, e.start, e.end])


def _report(policy: str, events: list[Event]) -> ScheduleReport:
    events = sorted(events, key=lambda e: (e.start, PROCESSORS.index(e.processor), e.chunk, e.stage))
    busy = {p: sum(e.end - e.start for e in events if e.processor == p) for p in PROCESSORS}
    return ScheduleReport(policy, events, max((e.end for e in events), default=0), busy)


def _check_nodes(graph: DependencyGraph, nodes: Mapping[Node, SubgraphNode]) -> None:
    if set(nodes) != set(graph.nodes):
        raise ValueError("node costs must cover exactly the graph's nodes")


def contribution(
    g: Node,
    graph: DependencyGraph,
    nodes: Mapping[Node, SubgraphNode],
    completed: set[Node],
    running: set[Node] = frozenset(),
) -> int:
    """Signed stall-reduction score of running ready node ``g`` next.

    ``S`` is the set of not-yet-started nodes whose last missing predecessor
    is ``g`` (all other predecessors completed or running). Only members of
    ``S`` on the other processor count: a CPU node scores ``+sum(T(S))``, an
    NPU node ``-sum(T(S))``.
    """
    if any(p not in completed for p in graph.preds[g]):
        raise ScheduleError(f"node {g} is not ready")
    done = completed | running | {g}
    proc = nodes[g].processor
    total = 0
    for n in graph.succs[g]:
        if n in completed or n in running:
            continue
        if nodes[n].processor != proc and all(p in done for p in graph.preds[n]):
            total += nodes[n].duration
    return total if proc == CPU else -total


Chooser = Callable[[str, list[Node], set[Node], set[Node]], "Node | None"]


def _simulate(policy: str, graph: DependencyGraph, nodes: Mapping[Node, SubgraphNode], choose: Chooser) -> ScheduleReport:
    _check_nodes(graph, nodes)
    by_proc = {p: [n for n in graph.nodes if nodes[n].processor == p] for p in PROCESSORS}
    completed: set[Node] = set()
    started: set[Node] = set()
    running: dict[str, tuple[Node, int]] = {}
    events = []
    t = 0
    total = len(nodes)
    while len(completed) < total:
        for proc in PROCESSORS:
            if proc in running:
                continue
            ready = [
                n for n in by_proc[proc]
                if n not in started and all(p in completed for p in graph.preds[n])
            ]
            if not ready:
                continue
            pick = choose(proc, ready, completed, {n for n, _ in running.values()})
            if pick is None:
                continue
            end = t + nodes[pick].duration
            started.add(pick)
            running[proc] = (pick, end)
            events.append(Event(pick[0], pick[1], proc, t, end))
        if not running:
            raise ScheduleError(f"{policy}: no runnable node at t={t}")
        t = min(end for _, end in running.values())
        for proc in [p for p, (_, end) in running.items() if end == t]:
            completed.add(running.pop(proc)[0])
    return _report(policy, events)


def schedule_greedy(graph: DependencyGraph, nodes: Mapping[Node, SubgraphNode]) -> ScheduleReport:
    """Out-of-order list scheduling: an idle processor takes its ready node with the largest contribution.

    Ties go to the smaller chunk index, then the smaller stage index. The NPU
    decides before the CPU when both go idle at the same instant.
    """

    def choose(proc, ready, completed, running):
        return min(ready, key=lambda n: (-contribution(n, graph, nodes, completed, running), n))

    return _simulate("greedy", graph, nodes, choose)


def schedule_inorder(graph: DependencyGraph, nodes: Mapping[Node, SubgraphNode]) -> ScheduleReport:
    """Each processor runs its nodes strictly in (chunk, stage) order, idling until the next one is ready."""
    queues = {p: [n for n in sorted(graph.nodes) if nodes[n].processor == p] for p in PROCESSORS}
    heads = {p: 0 for p in PROCESSORS}

    def choose(proc, ready, completed, running):
        q = queues[proc]
        if heads[proc] < len(q) and q[heads[proc]] in ready:
            heads[proc] += 1
            return q[heads[proc] - 1]
        return None

    return _simulate("inorder", graph, nodes, choose)


def _tails(graph: DependencyGraph, nodes: Mapping[Node, SubgraphNode]) -> dict[Node, int]:
    tail: dict[Node, int] = {}
    for n in sorted(graph.nodes, key=lambda n: (-n[1], -n[0])):
        tail[n] = nodes[n].duration + max((tail[s] for s in graph.succs[n]), default=0)
    return tail


def schedule_optimal(graph: DependencyGraph, nodes: Mapping[Node, SubgraphNode], limit: int = 12) -> ScheduleReport:
    """Exact minimum-makespan schedule by depth-first branch and bound.

    Nodes are appended one at a time, each starting at the later of its
    processor's free time and its predecessors' end. Every semi-active
    schedule arises from appending nodes in (start, node) order, so only
    sequences strictly increasing in that key are explored.
    """
    _check_nodes(graph, nodes)
    if len(nodes) > limit:
        raise InstanceTooLarge(f"{len(nodes)} nodes exceed the exhaustive-search limit of {limit}")
    tail = _tails(graph, nodes)
    all_nodes = sorted(graph.nodes)
    seed = schedule_greedy(graph, nodes)
    best_span = seed.makespan
    best_events = {e.key: (e.start, e.end) for e in seed.events}
    remaining0 = {p: sum(nodes[n].duration for n in all_nodes if nodes[n].processor == p) for p in PROCESSORS}

    placed: dict[Node, tuple[int, int]] = {}

    def dfs(free: dict[str, int], remaining: dict[str, int], span: int, last: tuple[int, Node]):
        nonlocal best_span, best_events
        if len(placed) == len(all_nodes):
            if span < best_span:
                best_span = span
                best_events = dict(placed)
            return
        cands = []
        for n in all_nodes:
            if n in placed or any(p not in placed for p in graph.preds[n]):
                continue
            st = max([free[nodes[n].processor]] + [placed[p][1] for p in graph.preds[n]])
            cands.append((st, n))
        lb = span
        for p in PROCESSORS:
            if remaining[p]:
                lb = max(lb, free[p] + remaining[p])
        for st, n in cands:
            lb = max(lb, st + tail[n])
        if lb >= best_span:
            return
        cands.sort()
        for st, n in cands:
            if (st, n) <= last:
                continue
            proc = nodes[n].processor
            end = st + nodes[n].duration
            placed[n] = (st, end)
            old_free = free[proc]
            free[proc] = end
            remaining[proc] -= nodes[n].duration
            dfs(free, remaining, max(span, end), (st, n))
            remaining[proc] += nodes[n].duration
            free[proc] = old_free
            del placed[n]

    dfs({p: 0 for p in PROCESSORS}, dict(remaining0), 0, (-1, (-1, -1)))
    events = [Event(n[0], n[1], nodes[n].processor, s, e) for n, (s, e) in best_events.items()]
    return _report("optimal", events)


def validate_schedule(graph: DependencyGraph, nodes: Mapping[Node, SubgraphNode], report: ScheduleReport) -> list[str]:
    """Independent check of a schedule; returns human-readable violations (empty if valid)."""
    problems = []
    seen: dict[Node, Event] = {}
    for e in report.events:
        if e.key in seen:
            problems.append(f"{e.key} scheduled twice")
        seen[e.key] = e
    missing = set(graph.nodes) - set(seen)
    if missing:
        problems.append(f"{len(missing)} nodes never scheduled, e.g. {sorted(missing)[0]}")
    for k, e in seen.items():
        if k not in nodes:
            problems.append(f"unknown node {k}")
            continue
        if e.processor != nodes[k].processor:
            problems.append(f"{k} ran on {e.processor}, affinity is {nodes[k].processor}")
        if e.end - e.start != nodes[k].duration:
            problems.append(f"{k} ran {e.end - e.start} units, expected {nodes[k].duration}")
        if e.start < 0:
            problems.append(f"{k} starts before time 0")
        for p in graph.preds.get(k, ()):
            if p in seen and seen[p].end > e.start:
                problems.append(f"{k} starts at {e.start} before predecessor {p} ends at {seen[p].end}")
    for proc in PROCESSORS:
        evs = sorted((e for e in report.events if e.processor == proc), key=lambda e: e.start)
        for a, b in zip(evs, evs[1:]):
            if b.start < a.end:
                problems.append(f"{proc} runs {a.key} and {b.key} at the same time")
    if report.events:
        if report.makespan != max(e.end for e in report.events):
            problems.append("makespan does not match the last event end")
        for proc in PROCESSORS:
            if report.busy.get(proc, 0) != sum(e.end - e.start for e in report.events if e.processor == proc):
                problems.append(f"{proc} busy time does not match its events")
    return problems


def random_instance(
    rng: np.random.Generator,
    num_chunks: int,
    num_stages: int,
    attention_prob: float = 0.4,
    max_duration: int = 20,
) -> tuple[DependencyGraph, dict[Node, SubgraphNode]]:
    """Random stage kinds, processor affinities and durations for property tests."""
    kinds = ["linear"] + [
        "attention" if rng.random() < attention_prob else "linear" for _ in range(num_stages - 1)
    ]
    procs = [PROCESSORS[int(rng.integers(2))] for _ in range(num_stages)]
    graph = build_dependencies(num_chunks, num_stages, kinds)
    nodes = {
        (i, j): SubgraphNode(i, j, procs[j], int(rng.integers(1, max_duration + 1)))
        for i in range(num_chunks)
        for j in range(num_stages)
    }
    return graph, nodes


def npu_dominant(nodes: Mapping[Node, SubgraphNode]) -> bool:
    tot = {p: sum(n.duration for n in nodes.values() if n.processor == p) for p in PROCESSORS}
    return tot[NPU] >= tot[CPU]
