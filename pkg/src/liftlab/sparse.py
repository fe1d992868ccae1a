"""Random sparse lifts: Bernoulli edge masks plus Gaussian weight draws.

Sampling keeps every vertex of the fully-connected lift and keeps each lifted
edge of base class (a, b) independently with probability lambda/(width of a),
clamped to [0, 1]. Kept edges draw weights from the class's normal
distribution. Streams are counter-based (Philox) and keyed by (seed, base
edge, purpose), with the cell index addressing a fixed offset in the stream,
so results are bit-identical regardless of sampling order and whether other
cells were kept.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .blueprints import Blueprint, LiftPlan, validate_blueprint
from .bundles import Section
from .graphs import Graph, VertexMap
from .modules import BadInputNaming, LiftedModule, lift_module

__all__ = [
    "WeightDist",
    "SparseLiftConfig",
    "EdgeDegreeStats",
    "DegreeSummary",
    "sample_sparse_lift",
    "config_from_plan",
    "sample_from_plan",
    "degree_summary",
    "out_degree_bound",
]


@dataclass(frozen=True)
class WeightDist:
    """Per-coordinate normal law for one base edge's weights."""

    mean: float | tuple[float, ...] = 0.0
    scale: float = 1.0

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError("weight distribution needs a positive scale (full support)")

    def mean_vector(self, w_dim: int) -> np.ndarray:
        m = np.asarray(self.mean, dtype=np.float64).reshape(-1)
        if m.shape[0] == 1:
            return np.full(w_dim, m[0])
        if m.shape[0] != w_dim:
            raise ValueError(f"mean vector has length {m.shape[0]}, weight dim is {w_dim}")
        return m


@dataclass(frozen=True)
class SparseLiftConfig:
    """Widths, expected in-degrees, weight laws, and the sampling seed.

    ``lam`` assigns every base edge (by canonical index) a positive expected
    in-degree; the dense case is ``lam = width of the source``. Input widths
    must match the number of input names supplied at sampling time.
    """

    n: tuple[int, ...]
    lam: tuple[float, ...]
    dists: tuple[WeightDist, ...] = ()
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "n", tuple(int(v) for v in self.n))
        object.__setattr__(self, "lam", tuple(float(v) for v in self.lam))
        if any(v < 1 for v in self.n):
            raise ValueError("every lift width must be at least 1")
        if any(not v > 0 for v in self.lam):
            raise ValueError("every lambda must be positive")
        if not self.dists:
            object.__setattr__(self, "dists", tuple(WeightDist() for _ in self.lam))
        if len(self.dists) != len(self.lam):
            raise ValueError("one weight distribution per base edge")
        if not 0 <= int(self.seed) < 2**64:
            raise ValueError("seed must fit in 64 bits")
        object.__setattr__(self, "seed", int(self.seed))


def _stream(seed: int, base_edge: int, purpose: int) -> np.random.Generator:
    key = np.array([seed, (base_edge << 1) | purpose], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def sample_sparse_lift(
    b: Blueprint,
    cfg: SparseLiftConfig,
    input_names: Mapping[int, Sequence[str]] | None = None,
) -> tuple[LiftedModule, Section]:
    """Draw one random sparse lift of ``b``; bit-identical per seed.

    All fully-connected vertices are kept (an unwired vertex just computes
    its activation of zero), only edges are masked. The returned weight
    section covers exactly the kept edges; initialize readout coefficients
    to zero separately.

    Raises:
        ValueError: invalid blueprint or config.
        BadInputNaming: name counts do not match input widths.
    """
    report = validate_blueprint(b)
    if not report.ok:
        raise ValueError("invalid blueprint: " + "; ".join(report.violations))
    if len(cfg.n) != b.base.n_vertices:
        raise ValueError("config widths must cover every base vertex")
    if len(cfg.lam) != b.base.n_edges:
        raise ValueError("config lambdas must cover every base edge")
    for v in sorted(b.initial):
        if input_names is not None and len(input_names[v]) != cfg.n[v]:
            raise BadInputNaming(
                f"base vertex {v} has width {cfg.n[v]} but "
                f"{len(input_names[v])} input names"
            )

    offsets = np.concatenate(([0], np.cumsum(cfg.n))).astype(np.intp)
    assignment = []
    for v, width in enumerate(cfg.n):
        assignment.extend([v] * width)

    edges: list[tuple[int, int]] = []
    weights: dict[tuple[int, int], np.ndarray] = {}
    for idx, (a, bb) in enumerate(b.base.edges):
        na, nb = cfg.n[a], cfg.n[bb]
        p = cfg.lam[idx] / na
        if p > 1.0:
            warnings.warn(
                f"edge ({a},{bb}): lambda {cfg.lam[idx]} exceeds source width {na}; "
                "clamping keep probability to 1",
                stacklevel=2,
            )
            p = 1.0
        mask = _stream(cfg.seed, idx, 0).random(na * nb) < p
        w_dim = b.w_dims.dims[idx]
        draws = _stream(cfg.seed, idx, 1).standard_normal(na * nb * w_dim)
        mean = cfg.dists[idx].mean_vector(w_dim)
        scale = cfg.dists[idx].scale
        kept = np.flatnonzero(mask)
        for cell in kept:
            i, j = divmod(int(cell), nb)
            u = int(offsets[a]) + i
            v = int(offsets[bb]) + j
            edges.append((u, v))
            weights[(u, v)] = mean + scale * draws[cell * w_dim : (cell + 1) * w_dim]

    g = Graph(int(offsets[-1]), edges)
    pi = VertexMap(g, b.base, tuple(assignment))
    c: dict[int, str] = {}
    for v in sorted(b.initial):
        names = None if input_names is None else list(input_names[v])
        for i in range(cfg.n[v]):
            c[int(offsets[v]) + i] = names[i] if names is not None else f"in{v}:{i}"
    lm = lift_module(b, g, pi, c)
    w = Section(lm.weight_bundle, [weights[e] for e in g.edges])
    return lm, w


def config_from_plan(
    plan: LiftPlan,
    symbols: Mapping[str, int] | None = None,
    seed: int = 0,
    dists: Mapping[int, WeightDist] | None = None,
    lam_override: Mapping[int, float] | None = None,
) -> SparseLiftConfig:
    """Build a sampling config from a lift plan: dense edges get lambda = source width."""
    widths = plan.resolve_widths(symbols)
    lam = []
    for idx, el in enumerate(plan.edge_lifts):
        a = plan.blueprint.base.edges[idx][0]
        if lam_override and idx in lam_override:
            lam.append(float(lam_override[idx]))
        elif el.mode == "dense":
            lam.append(float(widths[a]))
        else:
            lam.append(float(el.lam))
    d = tuple((dists or {}).get(i, WeightDist()) for i in range(len(lam)))
    return SparseLiftConfig(n=widths, lam=tuple(lam), dists=d, seed=seed)


def sample_from_plan(
    plan: LiftPlan,
    symbols: Mapping[str, int] | None = None,
    seed: int = 0,
    dists: Mapping[int, WeightDist] | None = None,
    lam_override: Mapping[int, float] | None = None,
) -> tuple[LiftedModule, Section]:
    """Sample a lift described by a plan, using its input naming."""
    cfg = config_from_plan(plan, symbols, seed, dists, lam_override)
    names: dict[int, list[str]] = {v: [] for v in sorted(plan.blueprint.initial)}
    for name, v in plan.input_names(cfg.n):
        names[v].append(name)
    return sample_sparse_lift(plan.blueprint, cfg, input_names=names)


def out_degree_bound(n_src: int, n_dst: int, lam: float, n_base_edges: int, delta: float) -> float:
    """High-probability bound on the max out-degree of one edge class."""
    return (
        7.0 * (n_dst / n_src) * lam
        + np.log(n_src)
        + np.log(n_base_edges)
        - np.log(delta)
    )


@dataclass(frozen=True)
class EdgeDegreeStats:
    base_edge: tuple[int, int]
    n_src: int
    n_dst: int
    n_edges: int
    in_min: int
    in_mean: float
    in_max: int
    out_min: int
    out_mean: float
    out_max: int
    bound: float | None = None
    within_bound: bool | None = None


@dataclass(frozen=True)
class DegreeSummary:
    """Exact degree structure of a lifted module, per base edge class."""

    per_edge: tuple[EdgeDegreeStats, ...]
    ratio: Mapping[int, float] = field(default_factory=dict)

    def stats(self, a: int, b: int) -> EdgeDegreeStats:
        for s in self.per_edge:
            if s.base_edge == (a, b):
                return s
        raise KeyError((a, b))


def degree_summary(
    lm: LiftedModule,
    lam: Mapping[int, float] | Sequence[float] | None = None,
    delta: float | None = None,
) -> DegreeSummary:
    """Min/mean/max in- and out-degrees per base edge class.

    With ``lam`` and ``delta`` supplied, each class also records the
    out-degree bound 7*(n_b/n_a)*lambda + log n_a + log(#base edges) -
    log(delta) and whether the observed maximum respects it.
    """
    base = lm.blueprint.base
    pi = lm.projection
    classes = [pi.preimage(v) for v in range(base.n_vertices)]
    per_edge = []
    d_max: dict[tuple[int, int], int] = {}
    for idx, (a, b) in enumerate(base.edges):
        src, dst = classes[a], classes[b]
        in_deg = [sum(1 for u in lm.lifted.parents(v) if pi(u) == a) for v in dst]
        out_deg = [sum(1 for w in lm.lifted.children(u) if pi(w) == b) for u in src]
        n_edges = sum(in_deg)
        bound = within = None
        if lam is not None and delta is not None:
            lam_e = lam[idx]
            bound = float(out_degree_bound(len(src), len(dst), lam_e, base.n_edges, delta))
            within = max(out_deg) <= bound
        d_max[(a, b)] = max(out_deg)
        per_edge.append(
            EdgeDegreeStats(
                base_edge=(a, b),
                n_src=len(src),
                n_dst=len(dst),
                n_edges=n_edges,
                in_min=min(in_deg),
                in_mean=n_edges / len(dst),
                in_max=max(in_deg),
                out_min=min(out_deg),
                out_mean=n_edges / len(src),
                out_max=max(out_deg),
                bound=bound,
                within_bound=within,
            )
        )
    ratio = {}
    for b in range(base.n_vertices):
        parents = base.parents(b)
        if parents:
            ratio[b] = sum(
                d_max[(a, b)] * len(classes[a]) / len(classes[b]) for a in parents
            )
    return DegreeSummary(per_edge=tuple(per_edge), ratio=ratio)
