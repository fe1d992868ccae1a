"""Blueprints: a base DAG with typed edge maps and vertex activations.

A blueprint fixes, for every base edge, a weight space, a pre-activation
space, and an edge primitive, and for every non-initial vertex an activation
primitive. A lift plan layers on top the data needed to materialize lifts:
per-vertex widths (integers or named symbols), per-edge dense/sparse wiring,
and the names of input copies. Both are immutable.

Blueprint files are JSON documents with keys ``vertices``, ``edges``,
``inputs``; see ``load_blueprint_file``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Union

from .bundles import Bundle
from .graphs import Graph
from .primitives import Primitive, SignatureError, UnknownPrimitive, registry_lookup

__all__ = [
    "Blueprint",
    "BlueprintReport",
    "OpRef",
    "EdgeLift",
    "InputGroup",
    "LiftPlan",
    "ParseError",
    "ValidationError",
    "validate_blueprint",
    "load_blueprint_file",
    "loads_blueprint",
    "bundled_blueprint_path",
]


class ParseError(ValueError):
    """Blueprint file is not well-formed (JSON or schema level)."""


class ValidationError(ValueError):
    """Blueprint or lift plan violates a structural invariant."""


@dataclass(frozen=True)
class OpRef:
    """A primitive name plus its static params, resolvable via the registry."""

    name: str
    params: tuple[tuple[str, Any], ...] = ()

    @classmethod
    def of(cls, name: str, params: Mapping[str, Any] | None = None) -> "OpRef":
        items = tuple(sorted((params or {}).items(), key=lambda kv: kv[0]))
        return cls(name, items)

    def lookup(self) -> Primitive:
        return registry_lookup(self.name, dict(self.params))


@dataclass(frozen=True)
class Blueprint:
    """Perceptron-module data over a base DAG.

    ``m_ops`` follows the canonical edge order of ``base``; ``sigma_ops`` maps
    every non-initial vertex to its activation primitive.
    """

    base: Graph
    initial: frozenset[int]
    terminal: frozenset[int]
    y_dims: Bundle
    z_dims: Bundle
    w_dims: Bundle
    m_ops: tuple[OpRef, ...]
    sigma_ops: Mapping[int, OpRef]

    def __post_init__(self):
        object.__setattr__(self, "initial", frozenset(int(v) for v in self.initial))
        object.__setattr__(self, "terminal", frozenset(int(v) for v in self.terminal))
        object.__setattr__(self, "sigma_ops", dict(self.sigma_ops))
        n, e = self.base.n_vertices, self.base.n_edges
        for v in self.initial | self.terminal:
            if not 0 <= v < n:
                raise ValidationError(f"vertex {v} outside the base graph")
        if len(self.y_dims) != n:
            raise ValidationError("y_dims must cover every base vertex")
        if len(self.z_dims) != e or len(self.w_dims) != e:
            raise ValidationError("z_dims and w_dims must cover every base edge")
        if len(self.m_ops) != e:
            raise ValidationError("m_ops must cover every base edge")

    def in_edge_indices(self, v: int) -> tuple[int, ...]:
        """Indices of in-edges of ``v`` in ascending parent order."""
        return tuple(self.base.edge_index(u, v) for u in self.base.parents(v))

    def sigma_arg_dims(self, v: int) -> tuple[int, ...]:
        """Pre-activation dims seen by sigma at ``v``, one per parent."""
        return tuple(self.z_dims.dims[i] for i in self.in_edge_indices(v))

    def is_smooth(self) -> bool:
        """Whether every primitive is continuously differentiable."""
        ops = list(self.m_ops) + list(self.sigma_ops.values())
        return all(op.lookup().smooth for op in ops)


@dataclass(frozen=True)
class BlueprintReport:
    ok: bool
    violations: tuple[str, ...]
    warnings: tuple[str, ...] = ()


def validate_blueprint(b: Blueprint) -> BlueprintReport:
    """Check structural invariants and primitive signatures.

    Zero dimensions are warnings, not violations: a weightless edge reads an
    empty weight space, which is harmless, but zero-dimensional activation or
    pre-activation spaces almost always indicate a mistake.
    """
    bad: list[str] = []
    warn: list[str] = []
    for v in sorted(b.initial):
        if b.base.parents(v):
            bad.append(f"initial vertex {v} has parents {list(b.base.parents(v))}")
        if v in b.sigma_ops:
            bad.append(f"initial vertex {v} carries an activation primitive")
    for v in range(b.base.n_vertices):
        if v not in b.initial and v not in b.sigma_ops:
            bad.append(f"non-initial vertex {v} has no activation primitive")
        if b.y_dims.dims[v] == 0:
            warn.append(f"vertex {v} has a zero-dimensional activation space")
    for idx, (u, v) in enumerate(b.base.edges):
        op = b.m_ops[idx]
        if b.z_dims.dims[idx] == 0:
            warn.append(f"edge ({u},{v}) has a zero-dimensional pre-activation space")
        try:
            prim = op.lookup()
        except UnknownPrimitive:
            bad.append(f"edge ({u},{v}): unknown primitive {op.name!r}")
            continue
        if prim.kind != "edge":
            bad.append(f"edge ({u},{v}): {op.name!r} is not an edge primitive")
            continue
        try:
            out = prim.out_dim((b.w_dims.dims[idx], b.y_dims.dims[u]))
        except SignatureError as exc:
            bad.append(f"edge ({u},{v}): {exc}")
            continue
        if out != b.z_dims.dims[idx]:
            bad.append(
                f"edge ({u},{v}): {op.name} outputs dim {out}, "
                f"declared z_dim is {b.z_dims.dims[idx]}"
            )
    for v, op in sorted(b.sigma_ops.items()):
        if v in b.initial:
            continue  # reported above
        try:
            prim = op.lookup()
        except UnknownPrimitive:
            bad.append(f"vertex {v}: unknown primitive {op.name!r}")
            continue
        if prim.kind != "vertex":
            bad.append(f"vertex {v}: {op.name!r} is not a vertex primitive")
            continue
        try:
            out = prim.out_dim(b.sigma_arg_dims(v))
        except SignatureError as exc:
            bad.append(f"vertex {v}: {exc}")
            continue
        if out != b.y_dims.dims[v]:
            bad.append(
                f"vertex {v}: {op.name} outputs dim {out}, "
                f"declared y_dim is {b.y_dims.dims[v]}"
            )
    return BlueprintReport(ok=not bad, violations=tuple(bad), warnings=tuple(warn))


# --------------------------------------------------------------- lift plans


@dataclass(frozen=True)
class EdgeLift:
    """How one base edge is wired in a lift: dense, or Bernoulli-sparse."""

    mode: str  # "dense" | "sparse"
    lam: float | None = None

    def __post_init__(self):
        if self.mode not in ("dense", "sparse"):
            raise ValidationError(f"unknown lift mode {self.mode!r}")
        if self.mode == "sparse":
            if self.lam is None or not self.lam > 0:
                raise ValidationError("sparse lift needs a positive lambda")
        elif self.lam is not None:
            raise ValidationError("dense lift takes no lambda")


@dataclass(frozen=True)
class InputGroup:
    """Names for the lifted copies of one initial vertex.

    Either a single literal name (``count is None``) or a counted family
    expanding to ``prefix:0 .. prefix:count-1``.
    """

    prefix: str
    vertex: int
    count: int | None = None

    def names(self) -> tuple[str, ...]:
        if self.count is None:
            return (self.prefix,)
        return tuple(f"{self.prefix}:{i}" for i in range(self.count))


Width = Union[int, str]


@dataclass(frozen=True)
class LiftPlan:
    """A blueprint plus everything needed to materialize lifts of it."""

    blueprint: Blueprint
    lift_dims: tuple[Width, ...]
    edge_lifts: tuple[EdgeLift, ...]
    inputs: tuple[InputGroup, ...] = ()

    def __post_init__(self):
        n, e = self.blueprint.base.n_vertices, self.blueprint.base.n_edges
        if len(self.lift_dims) != n:
            raise ValidationError("lift_dims must cover every base vertex")
        if len(self.edge_lifts) != e:
            raise ValidationError("edge_lifts must cover every base edge")
        seen_vertices = set()
        for g in self.inputs:
            if g.vertex not in self.blueprint.initial:
                raise ValidationError(f"input group {g.prefix!r} names non-initial vertex {g.vertex}")
            seen_vertices.add(g.vertex)
        for v in sorted(self.blueprint.initial):
            if v not in seen_vertices:
                raise ValidationError(f"initial vertex {v} has no input names")

    def symbols(self) -> tuple[str, ...]:
        return tuple(sorted({d for d in self.lift_dims if isinstance(d, str)}))

    def resolve_widths(self, symbols: Mapping[str, int] | None = None) -> tuple[int, ...]:
        """Concrete per-vertex widths, substituting named symbols.

        Raises:
            ValidationError: unknown symbol or nonpositive width.
        """
        symbols = symbols or {}
        widths = []
        for v, d in enumerate(self.lift_dims):
            if isinstance(d, str):
                if d not in symbols:
                    raise ValidationError(f"lift width symbol {d!r} (vertex {v}) not supplied")
                d = symbols[d]
            if int(d) < 1:
                raise ValidationError(f"vertex {v} resolved to width {d}, must be >= 1")
            widths.append(int(d))
        return tuple(widths)

    def input_names(self, widths: tuple[int, ...]) -> tuple[tuple[str, int], ...]:
        """Ordered (name, base vertex) pairs; validates counts against widths.

        The copies of each initial vertex are named in the declared group
        order, so the j-th lifted copy of vertex ``b`` takes the j-th name.
        """
        per_vertex: dict[int, list[str]] = {v: [] for v in self.blueprint.initial}
        out: list[tuple[str, int]] = []
        for g in self.inputs:
            for name in g.names():
                per_vertex[g.vertex].append(name)
                out.append((name, g.vertex))
        names = [n for n, _ in out]
        if len(set(names)) != len(names):
            dup = sorted({n for n in names if names.count(n) > 1})
            raise ValidationError(f"duplicate input names {dup}")
        for v in sorted(per_vertex):
            if len(per_vertex[v]) != widths[v]:
                raise ValidationError(
                    f"initial vertex {v} has {len(per_vertex[v])} input names "
                    f"but lift width {widths[v]}"
                )
        return tuple(out)


# --------------------------------------------------------------- JSON format


def _need(obj: Mapping, key: str, where: str):
    if key not in obj:
        raise ParseError(f"{where}: missing key {key!r}")
    return obj[key]


def _as_int(x, where: str) -> int:
    if isinstance(x, bool) or not isinstance(x, int):
        raise ParseError(f"{where}: expected an integer, got {x!r}")
    return x


def _op_ref(obj, where: str) -> OpRef:
    if not isinstance(obj, Mapping):
        raise ParseError(f"{where}: expected an object with 'name'")
    name = _need(obj, "name", where)
    params = obj.get("params", {})
    if not isinstance(params, Mapping):
        raise ParseError(f"{where}: params must be an object")
    return OpRef.of(str(name), {str(k): _jsonable(v) for k, v in params.items()})


def _jsonable(v):
    if isinstance(v, list):
        return tuple(_jsonable(x) for x in v)
    return v


def loads_blueprint(doc: Mapping[str, Any] | str) -> LiftPlan:
    """Build a LiftPlan from a parsed JSON document (or a JSON string).

    Raises:
        ParseError: structural problems in the document.
        ValidationError: the described blueprint fails validation.
    """
    if isinstance(doc, str):
        try:
            doc = json.loads(doc)
        except json.JSONDecodeError as exc:
            raise ParseError(f"invalid JSON: {exc}") from exc
    if not isinstance(doc, Mapping):
        raise ParseError("top level must be a JSON object")

    raw_vertices = _need(doc, "vertices", "document")
    raw_edges = _need(doc, "edges", "document")
    raw_inputs = doc.get("inputs", {})
    if not isinstance(raw_vertices, list) or not raw_vertices:
        raise ParseError("vertices must be a nonempty list")
    if not isinstance(raw_edges, list):
        raise ParseError("edges must be a list")

    by_id: dict[int, Mapping] = {}
    for i, v in enumerate(raw_vertices):
        where = f"vertices[{i}]"
        vid = _as_int(_need(v, "id", where), where + ".id")
        if vid in by_id:
            raise ParseError(f"{where}: duplicate vertex id {vid}")
        by_id[vid] = v
    n = len(by_id)
    if sorted(by_id) != list(range(n)):
        raise ParseError(f"vertex ids must be exactly 0..{n - 1}")

    y_dims, lift_dims = [], []
    initial, terminal = set(), set()
    sigma_ops: dict[int, OpRef] = {}
    for vid in range(n):
        v = by_id[vid]
        where = f"vertex {vid}"
        y_dims.append(_as_int(_need(v, "y_dim", where), where + ".y_dim"))
        ld = _need(v, "lift_dim", where)
        if not isinstance(ld, str):
            ld = _as_int(ld, where + ".lift_dim")
        lift_dims.append(ld)
        if v.get("initial", False):
            initial.add(vid)
        if v.get("terminal", False):
            terminal.add(vid)
        if "sigma" in v:
            sigma_ops[vid] = _op_ref(v["sigma"], where + ".sigma")
        elif not v.get("initial", False):
            raise ParseError(f"{where}: non-initial vertex needs a sigma")

    edge_data: dict[tuple[int, int], Mapping] = {}
    for i, e in enumerate(raw_edges):
        where = f"edges[{i}]"
        src = _as_int(_need(e, "src", where), where + ".src")
        dst = _as_int(_need(e, "dst", where), where + ".dst")
        if (src, dst) in edge_data:
            raise ParseError(f"{where}: duplicate edge ({src}, {dst})")
        edge_data[(src, dst)] = e

    try:
        base = Graph(n, edge_data.keys())
    except ValueError as exc:
        raise ParseError(f"edges do not form a DAG over the vertices: {exc}") from exc

    z_dims, w_dims, m_ops, edge_lifts = [], [], [], []
    for u, v in base.edges:  # canonical order
        e = edge_data[(u, v)]
        where = f"edge ({u},{v})"
        z_dims.append(_as_int(_need(e, "z_dim", where), where + ".z_dim"))
        w_dims.append(_as_int(_need(e, "w_dim", where), where + ".w_dim"))
        m_ops.append(_op_ref(_need(e, "m", where), where + ".m"))
        lift = e.get("lift", {"mode": "dense"})
        if not isinstance(lift, Mapping):
            raise ParseError(f"{where}: lift must be an object")
        mode = str(lift.get("mode", "dense"))
        lam = lift.get("lambda")
        try:
            edge_lifts.append(EdgeLift(mode, None if lam is None else float(lam)))
        except ValidationError as exc:
            raise ParseError(f"{where}: {exc}") from exc

    groups = []
    if not isinstance(raw_inputs, Mapping):
        raise ParseError("inputs must be an object")
    for name, spec in raw_inputs.items():
        where = f"inputs[{name!r}]"
        if isinstance(spec, Mapping):
            vid = _as_int(_need(spec, "vertex", where), where + ".vertex")
            count = _as_int(_need(spec, "count", where), where + ".count")
            if count < 1:
                raise ParseError(f"{where}: count must be positive")
            groups.append(InputGroup(str(name), vid, count))
        else:
            groups.append(InputGroup(str(name), _as_int(spec, where)))

    blueprint = Blueprint(
        base=base,
        initial=frozenset(initial),
        terminal=frozenset(terminal),
        y_dims=Bundle(tuple(y_dims)),
        z_dims=Bundle(tuple(z_dims)),
        w_dims=Bundle(tuple(w_dims)),
        m_ops=tuple(m_ops),
        sigma_ops=sigma_ops,
    )
    report = validate_blueprint(blueprint)
    if not report.ok:
        raise ValidationError("; ".join(report.violations))
    try:
        return LiftPlan(
            blueprint=blueprint,
            lift_dims=tuple(lift_dims),
            edge_lifts=tuple(edge_lifts),
            inputs=tuple(groups),
        )
    except ValidationError:
        raise


def load_blueprint_file(path: str | Path) -> LiftPlan:
    """Load and validate a blueprint JSON file.

    Raises:
        ParseError: unreadable or malformed document.
        ValidationError: well-formed but structurally invalid.
    """
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ParseError(f"cannot read {p}: {exc}") from exc
    return loads_blueprint(text)


def bundled_blueprint_path(name: str) -> Path:
    """Path of a blueprint shipped with the package (e.g. ``"sine"``)."""
    p = Path(__file__).parent / "data" / f"{name}.json"
    if not p.exists():
        known = sorted(q.stem for q in p.parent.glob("*.json"))
        raise ParseError(f"no bundled blueprint {name!r}; available: {known}")
    return p
