"""Power-network topology: adjacency, normalised graph operators and the
topological classification of load buses."""

from __future__ import annotations

import hashlib
import warnings
from collections import deque
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

from .errors import EmptyClass, IsolatedNode, UnreachableBus, ValidationError
from .numerics import eig_sym

GENERATOR = "G"
LOAD = "L"

HIGH_DEGREE = 4
LOW_DEGREE = 2

CASE_LABELS = {
    1: "loads 1 hop from generators",
    2: "loads 2 hops from generators",
    3: "loads 3 hops from generators",
    4: "loads with high degree of connectivity",
    5: "loads with low degree of connectivity",
}


@dataclass(frozen=True)
class PowerGraph:
    """Undirected, unweighted bus graph.

    Bus order in ``buses`` fixes the row/column order of every matrix derived
    from the graph.
    """

    buses: tuple[tuple[int, str], ...]
    edges: frozenset[tuple[int, int]]
    _index: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        ids = [b for b, _ in self.buses]
        if len(set(ids)) != len(ids):
            raise ValidationError("duplicate bus ids")
        for _, kind in self.buses:
            if kind not in (GENERATOR, LOAD):
                raise ValidationError(f"bus kind must be G or L, got {kind!r}")
        if not any(k == GENERATOR for _, k in self.buses):
            raise ValidationError("graph needs at least one generator bus")
        index = {b: i for i, b in enumerate(ids)}
        norm = set()
        for a, b in self.edges:
            if a == b:
                raise ValidationError(f"self-loop on bus {a}")
            if a not in index or b not in index:
                raise ValidationError(f"edge ({a}, {b}) references an unknown bus")
            norm.add((min(a, b), max(a, b)))
        object.__setattr__(self, "edges", frozenset(norm))
        object.__setattr__(self, "_index", index)
        if len(ids) > 1 and not self.is_connected():
            warnings.warn("power graph is not connected", stacklevel=2)

    @classmethod
    def from_lists(cls, buses, edges) -> "PowerGraph":
        return cls(tuple((int(b), str(k)) for b, k in buses), frozenset((int(a), int(b)) for a, b in edges))

    @property
    def n(self) -> int:
        return len(self.buses)

    @property
    def bus_ids(self) -> list[int]:
        return [b for b, _ in self.buses]

    def index(self, bus_id: int) -> int:
        return self._index[bus_id]

    def kind(self, bus_id: int) -> str:
        return self.buses[self._index[bus_id]][1]

    @property
    def generators(self) -> list[int]:
        return [b for b, k in self.buses if k == GENERATOR]

    @property
    def loads(self) -> list[int]:
        return [b for b, k in self.buses if k == LOAD]

    @cached_property
    def adjacency(self) -> np.ndarray:
        A = np.zeros((self.n, self.n))
        for a, b in self.edges:
            i, j = self._index[a], self._index[b]
            A[i, j] = A[j, i] = 1.0
        A.setflags(write=False)
        return A

    @cached_property
    def neighbors(self) -> dict[int, list[int]]:
        nb = {b: [] for b in self.bus_ids}
        for a, b in sorted(self.edges):
            nb[a].append(b)
            nb[b].append(a)
        return nb

    def degree(self, bus_id: int) -> int:
        return len(self.neighbors[bus_id])

    def is_connected(self) -> bool:
        start = self.buses[0][0]
        seen = {start}
        queue = deque([start])
        nb = self.neighbors
        while queue:
            u = queue.popleft()
            for v in nb[u]:
                if v not in seen:
                    seen.add(v)
                    queue.append(v)
        return len(seen) == self.n

    def fingerprint(self) -> str:
        """SHA-256 of bus kinds and adjacency, stable across processes."""
        h = hashlib.sha256()
        h.update(repr(self.buses).encode())
        h.update(np.ascontiguousarray(self.adjacency, dtype="<f8").tobytes())
        return h.hexdigest()

    def permuted(self, order: list[int]) -> "PowerGraph":
        """Same graph with buses listed in ``order`` (a permutation of ids)."""
        kinds = dict(self.buses)
        return PowerGraph(tuple((b, kinds[b]) for b in order), self.edges)


@dataclass(frozen=True)
class GraphOperators:
    normalized_laplacian: np.ndarray
    normalized_adjacency: np.ndarray
    lambda_max: float


def normalized_laplacian(g: PowerGraph) -> np.ndarray:
    """``I - D^{-1/2} A D^{-1/2}``."""
    A = g.adjacency
    deg = A.sum(axis=1)
    if np.any(deg == 0):
        isolated = [g.bus_ids[i] for i in np.flatnonzero(deg == 0)]
        raise IsolatedNode(f"buses without neighbours: {isolated}")
    d = 1.0 / np.sqrt(deg)
    return np.eye(g.n) - d[:, None] * A * d[None, :]


def normalized_adjacency(g: PowerGraph) -> np.ndarray:
    """Self-loop renormalised adjacency ``D~^{-1/2} (A + I) D~^{-1/2}``."""
    At = g.adjacency + np.eye(g.n)
    d = 1.0 / np.sqrt(At.sum(axis=1))
    return d[:, None] * At * d[None, :]


def graph_operators(g: PowerGraph) -> GraphOperators:
    L = normalized_laplacian(g)
    w, _ = eig_sym(L)
    return GraphOperators(L, normalized_adjacency(g), float(w[-1]))


def hops_to_nearest_generator(g: PowerGraph) -> dict[int, int]:
    """Multi-source BFS distance from every bus to its closest generator."""
    dist = {b: 0 for b in g.generators}
    queue = deque(g.generators)
    nb = g.neighbors
    while queue:
        u = queue.popleft()
        for v in nb[u]:
            if v not in dist:
                dist[v] = dist[u] + 1
                queue.append(v)
    missing = [b for b in g.bus_ids if b not in dist]
    if missing:
        raise UnreachableBus(f"no path to a generator from buses {missing}")
    return {b: dist[b] for b in g.bus_ids}


def classify_load_buses(
    g: PowerGraph, case: int, high_degree: int = HIGH_DEGREE, low_degree: int = LOW_DEGREE
) -> list[int]:
    """Load buses belonging to one of the five location classes.

    Cases 1-3 select loads exactly 1/2/3 hops from the nearest generator,
    case 4 loads with at least ``high_degree`` neighbours and case 5 loads with
    at most ``low_degree`` neighbours. Returned ids keep graph order.
    """
    if case in (1, 2, 3):
        hops = hops_to_nearest_generator(g)
        out = [b for b in g.loads if hops[b] == case]
    elif case == 4:
        out = [b for b in g.loads if g.degree(b) >= high_degree]
    elif case == 5:
        out = [b for b in g.loads if g.degree(b) <= low_degree]
    else:
        raise ValidationError(f"case index must be 1..5, got {case}")
    if not out:
        raise EmptyClass(f"no load bus matches case {case} ({CASE_LABELS[case]})")
    return out


def default_network() -> PowerGraph:
    """Desk-scale 9-bus, 3-generator network.

    Generators 1-3 form a ring; load 4 is a hub (degree 4) hanging off
    generators 1 and 2, and chains 4-5-6 and 3-8-9-6 put loads 1, 2 and 3 hops
    away from the nearest generator, so every location class is non-empty.
    """
    buses = [(1, GENERATOR), (2, GENERATOR), (3, GENERATOR)] + [(b, LOAD) for b in range(4, 10)]
    edges = [(1, 2), (2, 3), (1, 3), (1, 4), (2, 4), (4, 5), (4, 7), (5, 6), (6, 9), (3, 8), (8, 9)]
    return PowerGraph.from_lists(buses, edges)


def read_edge_list(path) -> PowerGraph:
    """Parse a whitespace-delimited network file.

    Lines ``<bus_id> G|L`` declare buses, lines ``<id> <id>`` declare edges;
    ``#`` starts a comment.
    """
    buses, edges = [], []
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tok = line.split()
        if len(tok) != 2:
            raise ValidationError(f"{path}:{lineno}: expected two fields, got {len(tok)}")
        if tok[1].upper() in (GENERATOR, LOAD):
            if edges:
                raise ValidationError(f"{path}:{lineno}: bus declared after edges")
            buses.append((int(tok[0]), tok[1].upper()))
        else:
            edges.append((int(tok[0]), int(tok[1])))
    return PowerGraph.from_lists(buses, edges)


def write_edge_list(g: PowerGraph, path) -> None:
    lines = ["# buses"] + [f"{b} {k}" for b, k in g.buses] + ["# edges"]
    lines += [f"{a} {b}" for a, b in sorted(g.edges)]
    Path(path).write_text("\n".join(lines) + "\n")
