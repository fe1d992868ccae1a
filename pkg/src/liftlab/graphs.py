"""Finite directed acyclic graphs and the homomorphism/fibration calculus.

Vertex ids are dense integers ``0..n-1`` and the canonical iteration order is
numeric order. Graphs are immutable and check acyclicity eagerly, so every
downstream induction can assume a fixed topological order. Edges form a set:
parallel edges between the same vertex pair are not representable.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass
from typing import Iterable, Sequence

__all__ = [
    "Graph",
    "VertexMap",
    "CycleDetected",
    "NotAHomomorphism",
    "DomainMismatch",
    "HomReport",
    "ParentMismatch",
    "FibrationReport",
    "topological_order",
    "validate_homomorphism",
    "validate_fibration",
    "compose_maps",
    "identity_map",
    "parse_edge_list",
    "format_edge_list",
]


class CycleDetected(ValueError):
    """Raised when a graph admits no topological order. Carries one cycle."""

    def __init__(self, cycle: Sequence[int]):
        self.cycle = tuple(cycle)
        path = " -> ".join(str(v) for v in self.cycle)
        super().__init__(f"graph is not acyclic, found cycle {path}")


class NotAHomomorphism(ValueError):
    """Raised by fibration validation when the map is not a homomorphism."""


class DomainMismatch(ValueError):
    """Raised when composing maps whose middle graphs differ."""


class Graph:
    """An immutable finite DAG over vertices ``0..n_vertices-1``.

    Parents and children of each vertex are stored in ascending id order;
    ``edges`` is the sorted tuple of edge pairs and defines the canonical
    edge indexing used by every bundle over edges.
    """

    __slots__ = (
        "n_vertices",
        "edges",
        "_parents",
        "_children",
        "_edge_index",
        "_topo",
    )

    def __init__(self, n_vertices: int, edges: Iterable[tuple[int, int]]):
        if n_vertices < 0:
            raise ValueError("vertex count must be nonnegative")
        edge_set = set()
        for u, v in edges:
            u, v = int(u), int(v)
            if not (0 <= u < n_vertices and 0 <= v < n_vertices):
                raise ValueError(f"edge ({u}, {v}) outside vertex range [0, {n_vertices})")
            if u == v:
                raise CycleDetected((u, u))
            edge_set.add((u, v))
        object.__setattr__(self, "n_vertices", int(n_vertices))
        object.__setattr__(self, "edges", tuple(sorted(edge_set)))
        parents: list[list[int]] = [[] for _ in range(n_vertices)]
        children: list[list[int]] = [[] for _ in range(n_vertices)]
        for u, v in self.edges:
            parents[v].append(u)
            children[u].append(v)
        object.__setattr__(self, "_parents", tuple(tuple(sorted(p)) for p in parents))
        object.__setattr__(self, "_children", tuple(tuple(sorted(c)) for c in children))
        object.__setattr__(
            self, "_edge_index", {e: i for i, e in enumerate(self.edges)}
        )
        object.__setattr__(self, "_topo", self._kahn_order())

    def __setattr__(self, name, value):  # pragma: no cover - guard only
        raise AttributeError("Graph is immutable")

    def _kahn_order(self) -> tuple[int, ...]:
        indeg = [len(self._parents[v]) for v in range(self.n_vertices)]
        ready = [v for v in range(self.n_vertices) if indeg[v] == 0]
        heapq.heapify(ready)
        order: list[int] = []
        while ready:
            v = heapq.heappop(ready)
            order.append(v)
            for c in self._children[v]:
                indeg[c] -= 1
                if indeg[c] == 0:
                    heapq.heappush(ready, c)
        if len(order) < self.n_vertices:
            raise CycleDetected(self._find_cycle(set(order)))
        return tuple(order)

    def _find_cycle(self, done: set[int]) -> tuple[int, ...]:
        # Every vertex outside `done` has a parent outside `done`; walking
        # parent links must therefore revisit a vertex.
        start = min(v for v in range(self.n_vertices) if v not in done)
        seen: dict[int, int] = {}
        path = [start]
        v = start
        while v not in seen:
            seen[v] = len(path) - 1
            v = min(u for u in self._parents[v] if u not in done)
            path.append(v)
        cycle = path[seen[v] : -1]  # last entry repeats the closing vertex
        cycle.reverse()  # we walked parent links, so reverse into edge direction
        return tuple(cycle)

    def parents(self, v: int) -> tuple[int, ...]:
        """In-neighbors of ``v`` in ascending id order."""
        return self._parents[v]

    def children(self, v: int) -> tuple[int, ...]:
        """Out-neighbors of ``v`` in ascending id order."""
        return self._children[v]

    def edge_index(self, u: int, v: int) -> int:
        """Position of edge ``(u, v)`` in the canonical edge ordering."""
        return self._edge_index[(u, v)]

    def has_edge(self, u: int, v: int) -> bool:
        return (u, v) in self._edge_index

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, Graph)
            and self.n_vertices == other.n_vertices
            and self.edges == other.edges
        )

    def __hash__(self) -> int:
        return hash((self.n_vertices, self.edges))

    def __repr__(self) -> str:
        return f"Graph(n_vertices={self.n_vertices}, n_edges={self.n_edges})"


@dataclass(frozen=True)
class VertexMap:
    """A total assignment of source vertices to target vertices.

    This is the raw map; being a homomorphism or a fibration is a property
    checked by the validators below, not an invariant of the type.
    """

    source: Graph
    target: Graph
    assignment: tuple[int, ...]

    def __post_init__(self):
        if len(self.assignment) != self.source.n_vertices:
            raise ValueError("assignment must cover every source vertex")
        for v, image in enumerate(self.assignment):
            if not (0 <= image < self.target.n_vertices):
                raise ValueError(f"vertex {v} maps to {image}, outside the target")
        object.__setattr__(self, "assignment", tuple(int(a) for a in self.assignment))

    def __call__(self, v: int) -> int:
        return self.assignment[v]

    def preimage(self, w: int) -> tuple[int, ...]:
        """Source vertices mapping to ``w``, ascending."""
        return tuple(v for v, a in enumerate(self.assignment) if a == w)


@dataclass(frozen=True)
class HomReport:
    """Outcome of a homomorphism check."""

    ok: bool
    violations: tuple[tuple[int, int], ...]


@dataclass(frozen=True)
class ParentMismatch:
    """Fibration failure detail at one source vertex.

    ``missing`` lists target parents not reached by any mapped parent,
    ``duplicated`` lists target parents reached more than once.
    """

    vertex: int
    missing: tuple[int, ...]
    duplicated: tuple[int, ...]


@dataclass(frozen=True)
class FibrationReport:
    ok: bool
    mismatches: tuple[ParentMismatch, ...]


def topological_order(g: Graph) -> list[int]:
    """Topological order with smallest-id-first tie-breaking.

    Deterministic given the canonical vertex ordering; re-running returns the
    same list. Construction already guarantees acyclicity, so this never
    raises on a constructed ``Graph``.
    """
    return list(g._topo)


def validate_homomorphism(m: VertexMap) -> HomReport:
    """Check that every source edge maps to a target edge."""
    bad = [
        (u, v) for (u, v) in m.source.edges if not m.target.has_edge(m(u), m(v))
    ]
    return HomReport(ok=not bad, violations=tuple(bad))


def validate_fibration(m: VertexMap) -> FibrationReport:
    """Check that ``m`` restricts to a bijection on every in-neighborhood.

    For each source vertex ``v``, the mapped parents of ``v`` must hit each
    parent of ``m(v)`` exactly once.

    Raises:
        NotAHomomorphism: if ``m`` fails :func:`validate_homomorphism`.
    """
    hom = validate_homomorphism(m)
    if not hom.ok:
        raise NotAHomomorphism(f"violating edges: {list(hom.violations)}")
    mismatches: list[ParentMismatch] = []
    for v in range(m.source.n_vertices):
        counts: dict[int, int] = {}
        for u in m.source.parents(v):
            counts[m(u)] = counts.get(m(u), 0) + 1
        target_parents = m.target.parents(m(v))
        missing = tuple(p for p in target_parents if counts.get(p, 0) == 0)
        duplicated = tuple(sorted(p for p, c in counts.items() if c > 1))
        if missing or duplicated:
            mismatches.append(ParentMismatch(v, missing, duplicated))
    return FibrationReport(ok=not mismatches, mismatches=tuple(mismatches))


def compose_maps(f: VertexMap, g: VertexMap) -> VertexMap:
    """Composite map ``v -> g(f(v))``, defined when ``f.target == g.source``.

    Raises:
        DomainMismatch: if the middle graphs differ.
    """
    if f.target != g.source:
        raise DomainMismatch("target of the first map must equal source of the second")
    return VertexMap(f.source, g.target, tuple(g(f(v)) for v in range(f.source.n_vertices)))


def identity_map(g: Graph) -> VertexMap:
    return VertexMap(g, g, tuple(range(g.n_vertices)))


def parse_edge_list(text: str, n_vertices: int | None = None) -> Graph:
    """Parse the debugging edge-list format: one ``u v`` pair per line.

    Lines starting with ``#`` are comments, except that a directive of the
    form ``# vertices: N`` fixes the vertex count (needed to round-trip
    graphs with isolated trailing vertices). Without a directive or an
    explicit ``n_vertices``, the count is one past the largest id seen.
    """
    edges: list[tuple[int, int]] = []
    declared = n_vertices
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#"):
            body = line[1:].strip()
            if body.startswith("vertices:") and declared is None:
                declared = int(body.split(":", 1)[1])
            continue
        parts = line.split()
        if len(parts) != 2:
            raise ValueError(f"line {lineno}: expected 'u v', got {raw!r}")
        edges.append((int(parts[0]), int(parts[1])))
    if declared is None:
        declared = 1 + max((max(u, v) for u, v in edges), default=-1)
    return Graph(declared, edges)


def format_edge_list(g: Graph) -> str:
    lines = [f"# vertices: {g.n_vertices}"]
    lines.extend(f"{u} {v}" for u, v in g.edges)
    return "\n".join(lines) + "\n"
