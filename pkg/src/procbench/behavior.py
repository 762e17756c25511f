"""Event logs, directly-follows graphs, eventually-follows pairs and footprints."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping

Trace = tuple[str, ...]

PRECEDES = "precedes"
FOLLOWS = "follows"
PARALLEL = "parallel"
UNRELATED = "unrelated"
RELATIONS = (PRECEDES, FOLLOWS, PARALLEL, UNRELATED)


@dataclass(frozen=True)
class EventLog:
    """A multiset of traces; ``alphabet`` is derived from the traces."""

    traces: tuple[Trace, ...]
    _index: frozenset = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "traces", tuple(tuple(t) for t in self.traces))
        object.__setattr__(self, "_index", frozenset(self.traces))

    @property
    def alphabet(self) -> frozenset[str]:
        return frozenset(a for t in self.traces for a in t)

    def __len__(self) -> int:
        return len(self.traces)

    def __iter__(self):
        return iter(self.traces)

    def __contains__(self, trace) -> bool:
        return tuple(trace) in self._index


@dataclass(frozen=True)
class Dfg:
    nodes: frozenset[str]
    edges: frozenset[tuple[str, str]] = field(default_factory=frozenset)

    def __post_init__(self):
        object.__setattr__(self, "nodes", frozenset(self.nodes))
        object.__setattr__(self, "edges", frozenset(tuple(e) for e in self.edges))
        for x, y in self.edges:
            if x not in self.nodes or y not in self.nodes:
                raise ValueError(f"edge ({x!r}, {y!r}) has an endpoint outside the node set")

    def sorted_edges(self) -> list[tuple[str, str]]:
        return sorted(self.edges)


def ef_pairs(trace: Iterable[str]) -> set[tuple[str, str]]:
    """Eventually-follows pairs: every (a_i, a_j) with i < j, as a set of label pairs."""
    steps = list(trace)
    return {(steps[i], steps[j]) for i in range(len(steps)) for j in range(i + 1, len(steps))}


def dfg_of_log(log: EventLog | Iterable[Trace]) -> Dfg:
    traces = log.traces if isinstance(log, EventLog) else tuple(tuple(t) for t in log)
    nodes = {a for t in traces for a in t}
    edges = {(t[i], t[i + 1]) for t in traces for i in range(len(t) - 1)}
    return Dfg(frozenset(nodes), frozenset(edges))


@dataclass(frozen=True)
class FootprintMatrix:
    alphabet: tuple[str, ...]
    cells: Mapping[tuple[str, str], str]

    def __getitem__(self, pair: tuple[str, str]) -> str:
        return self.cells[pair]

    def off_diagonal(self):
        for x in self.alphabet:
            for y in self.alphabet:
                if x != y:
                    yield (x, y), self.cells[(x, y)]


def footprint_of_dfg(dfg: Dfg, alphabet: Iterable[str]) -> FootprintMatrix:
    """Classify every ordered pair over ``alphabet``; edges leaving the alphabet are ignored."""
    acts = tuple(sorted(set(alphabet)))
    edges = dfg.edges
    cells = {}
    for x in acts:
        for y in acts:
            fwd = (x, y) in edges
            bwd = (y, x) in edges
            if fwd and bwd:
                rel = PARALLEL
            elif fwd:
                rel = PRECEDES
            elif bwd:
                rel = FOLLOWS
            else:
                rel = UNRELATED
            cells[(x, y)] = rel
    return FootprintMatrix(acts, cells)
