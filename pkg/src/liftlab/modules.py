"""Lifted modules: graphs wired over a blueprint, forward evaluation, readout.

A lifted module is a graph together with a projection homomorphism onto the
blueprint's base and an injective naming of the lifted input vertices. Its
forward map runs in topological order: initial vertices copy named inputs,
every other vertex applies the base edge map on each in-edge, sums the
results within each parent class (ascending lifted id), and applies the base
activation. Parent classes with no wired edge contribute zero vectors, so an
unwired hidden vertex still computes its activation of zero.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .blueprints import Blueprint
from .bundles import Bundle, Section, pullback_section
from .graphs import Graph, VertexMap, topological_order, validate_homomorphism

__all__ = [
    "LiftedModule",
    "ReadoutCoeffs",
    "BadHomomorphism",
    "BadInputNaming",
    "MissingInput",
    "ShapeMismatch",
    "lift_module",
    "fully_connected_lift",
    "forward",
    "linear_readout",
    "pullback_edge_section",
]


class BadHomomorphism(ValueError):
    """The projection does not preserve edges into the base graph."""


class BadInputNaming(ValueError):
    """Input naming is not total, not injective, or types mismatch."""


class MissingInput(KeyError):
    def __init__(self, name: str):
        self.name = name
        super().__init__(f"no value supplied for input {name!r}")


class ShapeMismatch(ValueError):
    """A supplied array does not match the bundle it must live in."""


@dataclass(frozen=True)
class LiftedModule:
    """A lift of ``blueprint`` along ``projection`` with named inputs.

    ``naming`` pairs every lifted initial vertex with its input name, in
    ascending vertex order. Derived wiring tables are precomputed so repeated
    forward/backward sweeps stay cheap.
    """

    blueprint: Blueprint
    lifted: Graph
    projection: VertexMap
    naming: tuple[tuple[int, str], ...]

    # derived, filled in __post_init__
    weight_bundle: Bundle = field(init=False, repr=False)
    activation_bundle: Bundle = field(init=False, repr=False)

    def __post_init__(self):
        base = self.blueprint.base
        pi = self.projection
        if pi.source is not self.lifted and pi.source != self.lifted:
            raise BadHomomorphism("projection source is not the lifted graph")
        if pi.target != base:
            raise BadHomomorphism("projection target is not the blueprint base")
        report = validate_homomorphism(pi)
        if not report.ok:
            raise BadHomomorphism(f"violating edges: {list(report.violations)}")
        hit = set(pi.assignment)
        empty = [b for b in range(base.n_vertices) if b not in hit]
        if empty:
            # the readout normalizes by class size, so no class may be empty
            raise ValueError(f"base vertices {empty} have no lifted copies")

        named = dict(self.naming)
        inputs = [v for v in range(self.lifted.n_vertices) if pi(v) in self.blueprint.initial]
        if sorted(named) != inputs:
            raise BadInputNaming("naming must cover exactly the lifted initial vertices")
        names = [named[v] for v in inputs]
        if len(set(names)) != len(names):
            raise BadInputNaming("input names must be injective")
        object.__setattr__(self, "naming", tuple((v, named[v]) for v in inputs))

        # base edge index per lifted edge, in canonical lifted-edge order
        base_edge = tuple(
            base.edge_index(pi(u), pi(v)) for u, v in self.lifted.edges
        )
        object.__setattr__(self, "_base_edge", base_edge)
        object.__setattr__(
            self,
            "weight_bundle",
            Bundle(tuple(self.blueprint.w_dims.dims[i] for i in base_edge)),
        )
        object.__setattr__(
            self,
            "activation_bundle",
            Bundle(tuple(self.blueprint.y_dims.dims[pi(v)] for v in range(self.lifted.n_vertices))),
        )

        m_prims = tuple(op.lookup() for op in self.blueprint.m_ops)
        sigma_prims = {v: op.lookup() for v, op in self.blueprint.sigma_ops.items()}
        object.__setattr__(self, "_m_prims", m_prims)
        object.__setattr__(self, "_sigma_prims", sigma_prims)

        # per lifted vertex: in-edges as (parent, lifted edge idx, base edge
        # idx, class slot); classes follow ascending base-parent order
        wiring = []
        for v in range(self.lifted.n_vertices):
            bv = pi(v)
            if bv in self.blueprint.initial:
                wiring.append(None)
                continue
            slots = {a: k for k, a in enumerate(base.parents(bv))}
            rows = tuple(
                (u, self.lifted.edge_index(u, v), base.edge_index(pi(u), bv), slots[pi(u)])
                for u in self.lifted.parents(v)
            )
            class_dims = self.blueprint.sigma_arg_dims(bv)
            wiring.append((bv, rows, class_dims))
        object.__setattr__(self, "_wiring", tuple(wiring))
        object.__setattr__(self, "_topo", tuple(topological_order(self.lifted)))
        object.__setattr__(
            self, "_terminals",
            tuple(v for v in range(self.lifted.n_vertices) if pi(v) in self.blueprint.terminal),
        )

    @property
    def input_names(self) -> tuple[str, ...]:
        return tuple(name for _, name in self.naming)

    @property
    def terminal_vertices(self) -> tuple[int, ...]:
        """Lifted vertices over terminal base vertices, ascending."""
        return self._terminals

    def terminal_classes(self) -> dict[int, tuple[int, ...]]:
        """Terminal base vertex -> its lifted copies, ascending."""
        out: dict[int, list[int]] = {b: [] for b in sorted(self.blueprint.terminal)}
        for v in self._terminals:
            out[self.projection(v)].append(v)
        return {b: tuple(vs) for b, vs in out.items()}

    def class_size(self, base_vertex: int) -> int:
        return len(self.projection.preimage(base_vertex))

    @property
    def n_parameters(self) -> int:
        """Total weight coordinates (exact count of sampled edge weights)."""
        return self.weight_bundle.total_dim


@dataclass(frozen=True)
class ReadoutCoeffs:
    """Linear readout coefficients: ``k`` rows per terminal lifted vertex.

    ``rows[i]`` has shape (k, activation dim of terminal vertex
    ``vertices[i]``); coefficients exist exactly for the terminal vertices.
    """

    k: int
    vertices: tuple[int, ...]
    rows: tuple[np.ndarray, ...]

    def __post_init__(self):
        if len(self.vertices) != len(self.rows):
            raise ShapeMismatch("one coefficient block per terminal vertex")
        rows = []
        for v, r in zip(self.vertices, self.rows):
            arr = np.asarray(r, dtype=np.float64)
            if arr.ndim != 2 or arr.shape[0] != self.k:
                raise ShapeMismatch(
                    f"coefficients at vertex {v} must have {self.k} rows, got shape {arr.shape}"
                )
            rows.append(arr)
        object.__setattr__(self, "rows", tuple(rows))
        object.__setattr__(self, "vertices", tuple(int(v) for v in self.vertices))

    @classmethod
    def zeros(cls, lm: LiftedModule, k: int) -> "ReadoutCoeffs":
        vs = lm.terminal_vertices
        dims = [lm.activation_bundle.dims[v] for v in vs]
        return cls(k, vs, tuple(np.zeros((k, d)) for d in dims))

    def check_against(self, lm: LiftedModule) -> None:
        if self.vertices != lm.terminal_vertices:
            raise ShapeMismatch(
                "readout coefficients must cover exactly the terminal vertices"
            )
        for v, r in zip(self.vertices, self.rows):
            if r.shape[1] != lm.activation_bundle.dims[v]:
                raise ShapeMismatch(
                    f"coefficients at vertex {v} have dim {r.shape[1]}, "
                    f"activations have dim {lm.activation_bundle.dims[v]}"
                )

    def to_flat(self) -> np.ndarray:
        if not self.rows:
            return np.zeros(0)
        return np.concatenate([r.ravel() for r in self.rows])

    def from_flat(self, flat: np.ndarray) -> "ReadoutCoeffs":
        flat = np.asarray(flat, dtype=np.float64).reshape(-1)
        out, off = [], 0
        for r in self.rows:
            n = r.size
            out.append(flat[off : off + n].reshape(r.shape).copy())
            off += n
        if off != flat.shape[0]:
            raise ShapeMismatch("flat vector length does not match coefficients")
        return ReadoutCoeffs(self.k, self.vertices, tuple(out))


def lift_module(
    b: Blueprint,
    g: Graph,
    pi: VertexMap,
    c: Mapping[int, str],
    name_types: Mapping[str, int] | None = None,
) -> LiftedModule:
    """Lift ``b`` along the homomorphism ``pi`` with input naming ``c``.

    ``c`` maps every lifted vertex over an initial base vertex to a distinct
    name. If ``name_types`` is given, each name's declared base vertex must
    equal the projection of the vertex carrying it.

    Raises:
        BadHomomorphism: ``pi`` is not a homomorphism into ``b.base``.
        BadInputNaming: naming not total/injective, or a type mismatch.
    """
    naming = tuple(sorted((int(v), str(n)) for v, n in c.items()))
    if name_types is not None:
        for v, n in naming:
            if n not in name_types:
                raise BadInputNaming(f"name {n!r} is not declared")
            if name_types[n] != pi(v):
                raise BadInputNaming(
                    f"name {n!r} is typed over base vertex {name_types[n]}, "
                    f"but vertex {v} projects to {pi(v)}"
                )
    return LiftedModule(blueprint=b, lifted=g, projection=pi, naming=naming)


def fully_connected_lift(
    b: Blueprint,
    n: Mapping[int, int] | Sequence[int],
    input_names: Mapping[int, Sequence[str]] | None = None,
) -> LiftedModule:
    """The lift with ``n[v]`` copies of each base vertex and all edges wired.

    Lifted ids group by base vertex: copy ``i`` of base vertex ``v`` has id
    ``offset(v) + i``. Default input names are ``"in<v>:<i>"``.
    """
    widths = [int(n[v]) for v in range(b.base.n_vertices)]
    if any(w < 1 for w in widths):
        raise ValueError("every lift width must be at least 1")
    offsets = np.concatenate(([0], np.cumsum(widths)))
    total = int(offsets[-1])
    assignment = []
    for v, w in enumerate(widths):
        assignment.extend([v] * w)
    edges = []
    for u, v in b.base.edges:
        for i in range(widths[u]):
            for j in range(widths[v]):
                edges.append((int(offsets[u]) + i, int(offsets[v]) + j))
    pi = VertexMap(Graph(total, edges), b.base, tuple(assignment))
    c: dict[int, str] = {}
    for v in sorted(b.initial):
        names = None if input_names is None else list(input_names[v])
        if names is not None and len(names) != widths[v]:
            raise BadInputNaming(
                f"base vertex {v} has width {widths[v]} but {len(names)} names"
            )
        for i in range(widths[v]):
            c[int(offsets[v]) + i] = names[i] if names is not None else f"in{v}:{i}"
    return lift_module(b, pi.source, pi, c)


def _check_weights(lm: LiftedModule, w: Section) -> None:
    if w.bundle != lm.weight_bundle:
        raise ShapeMismatch(
            f"weight section has dims {w.bundle.dims[:8]}..., module expects "
            f"{lm.weight_bundle.dims[:8]}..."
        )


def forward(lm: LiftedModule, w: Section, x: Mapping[str, np.ndarray]) -> Section:
    """Activations of every lifted vertex, in one deterministic sweep.

    Raises:
        MissingInput: a declared input name is absent from ``x``.
        ShapeMismatch: a weight or input array has the wrong length.
    """
    _check_weights(lm, w)
    acts: list[np.ndarray | None] = [None] * lm.lifted.n_vertices
    for v, name in lm.naming:
        if name not in x:
            raise MissingInput(name)
        val = np.asarray(x[name], dtype=np.float64).reshape(-1)
        want = lm.activation_bundle.dims[v]
        if val.shape[0] != want:
            raise ShapeMismatch(
                f"input {name!r} has length {val.shape[0]}, expected {want}"
            )
        acts[v] = val
    for v in lm._topo:
        if acts[v] is not None:
            continue
        bv, rows, class_dims = lm._wiring[v]
        sums: list[np.ndarray | None] = [None] * len(class_dims)
        for u, eidx, bidx, slot in rows:
            z = lm._m_prims[bidx].eval(w.values[eidx], acts[u])
            if sums[slot] is None:
                sums[slot] = z
            else:
                sums[slot] = sums[slot] + z
        args = tuple(
            s if s is not None else np.zeros(class_dims[k])
            for k, s in enumerate(sums)
        )
        acts[v] = lm._sigma_prims[bv].eval(*args)
    return Section(lm.activation_bundle, acts)


def linear_readout(a: ReadoutCoeffs, acts: Section, lm: LiftedModule) -> np.ndarray:
    """Class-normalized linear readout over terminal activations.

    Component ``i`` sums ``<a[i,v], acts[v]>`` over the copies ``v`` of each
    terminal base vertex, scaled by ``1/sqrt(#copies)``, classes in ascending
    base id, copies in ascending lifted id.
    """
    a.check_against(lm)
    if acts.bundle != lm.activation_bundle:
        raise ShapeMismatch("activation section does not match the module")
    out = np.zeros(a.k)
    pos = {v: i for i, v in enumerate(a.vertices)}
    for b, copies in lm.terminal_classes().items():
        if not copies:
            continue
        scale = 1.0 / np.sqrt(len(copies))
        inner = np.zeros(a.k)
        for v in copies:
            inner += a.rows[pos[v]] @ acts.values[v]
        out += scale * inner
    return out


def pullback_edge_section(
    phi: VertexMap, s: Section
) -> Section:
    """Pull an edge-indexed section on ``phi.target`` back along ``phi``.

    The lifted edge ``(u, v)`` receives a copy of the value at the image
    edge ``(phi(u), phi(v))``; ``phi`` must be a homomorphism.
    """
    report = validate_homomorphism(phi)
    if not report.ok:
        raise BadHomomorphism(f"violating edges: {list(report.violations)}")
    index_map = [
        phi.target.edge_index(phi(u), phi(v)) for u, v in phi.source.edges
    ]
    return pullback_section(index_map, s)
