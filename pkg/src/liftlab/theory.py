"""Covering analysis: witness matchings inside lifts and the constants they certify.

A small "witness" module achieving low loss can be matched into a larger lift
by a partial morphism: a parent-closed vertex subset of the lift, mapped onto
the witness by a fibration that respects projection and input naming, with
every matched edge weight within ``eta`` of its witness counterpart and every
witness vertex covered by a prescribed fraction of its lift class. This module
provides the matcher, the verifier, and the quantities built on top of it:
per-vertex volume fractions (``alpha_parameter``), bracketed activation
continuity constants (``continuity_bound``), the readout direction whose
linearized error the matching certifies (``tangent_gap``), and the size
thresholds and convergence constants of the main guarantee
(``threshold_constants``).

Quota selection uses Hall-style bipartite matching; searches process witness
vertices stagewise in base topological order, mirroring how a matching is
grown class by class. Monte Carlo estimators (ball masses, continuity lower
estimates) own seeded generators and are deterministic per seed.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence, Union

import numpy as np

from .bundles import Section
from .graphs import topological_order
from .modules import LiftedModule, ReadoutCoeffs, forward, linear_readout
from .sparse import WeightDist

__all__ = [
    "BallMass",
    "NonPositiveRadius",
    "gaussian_ball_mass",
    "AlphaParams",
    "VertexAlpha",
    "alpha_parameter",
    "ContinuityBracket",
    "UnsupportedPrimitive",
    "continuity_bound",
    "PartialMorphism",
    "CoveringReport",
    "NotFound",
    "Infeasible",
    "disjoint_quota_select",
    "find_covering_morphism",
    "verify_covering",
    "covering_probability_bound",
    "admissible_width",
    "poisson_floor",
    "TangentGap",
    "UnverifiedMorphism",
    "tangent_gap",
    "TheoryReport",
    "EpsilonBelowWitness",
    "threshold_constants",
]

# Volume quotas compare an integer count against alpha * class size; the
# product picks up float noise (1/n * n may exceed 1), so both the quota
# ceiling and the verifier allow this much absolute slack.
_VOLUME_TOL = 1e-9


class NonPositiveRadius(ValueError):
    """Ball mass requested with a radius that is not strictly positive."""


class UnsupportedPrimitive(KeyError):
    """A primitive has no certified continuity rule."""


class UnverifiedMorphism(ValueError):
    """A tangent gap was requested for a morphism that fails verification."""


class EpsilonBelowWitness(ValueError):
    """Target error does not exceed the loss the witness itself achieves."""


class Infeasible(ValueError):
    """Quota selection admits no disjoint system; carries a violating family.

    ``indices`` is a set of input indices whose quotas jointly exceed the
    size of the union of their candidate sets (``need`` > ``have``).
    """

    def __init__(self, indices: frozenset[int], need: int, have: int):
        self.indices = indices
        self.need = need
        self.have = have
        super().__init__(
            f"indices {sorted(indices)} need {need} disjoint elements "
            f"but their candidate sets union to only {have}"
        )


# ------------------------------------------------------------- ball masses


@dataclass(frozen=True)
class BallMass:
    """Probability mass of a ball, with the estimator's standard error.

    ``std_error`` is zero when the value is exact (dimension 0 or 1);
    otherwise it is the binomial standard error of the Monte Carlo mean.
    """

    value: float
    std_error: float
    n_samples: int


def gaussian_ball_mass(
    dist: WeightDist,
    center: np.ndarray | Sequence[float] | float,
    tau: float,
    n_samples: int = 100_000,
    seed: int = 0,
) -> BallMass:
    """Mass the weight law puts on the ball of radius ``tau`` around ``center``.

    Dimension 1 uses the error-function closed form; higher dimensions draw
    ``n_samples`` points from the law with a fixed seed. Dimension 0 (an edge
    with no weight) is trivially mass 1.

    Raises:
        NonPositiveRadius: if ``tau <= 0``.
    """
    if not tau > 0.0:
        raise NonPositiveRadius(f"ball radius must be positive, got {tau}")
    c = np.asarray(center, dtype=np.float64).reshape(-1)
    dim = c.shape[0]
    if dim == 0:
        return BallMass(1.0, 0.0, 0)
    mean = dist.mean_vector(dim)
    s = dist.scale
    if dim == 1:
        hi = (c[0] + tau - mean[0]) / (s * math.sqrt(2.0))
        lo = (c[0] - tau - mean[0]) / (s * math.sqrt(2.0))
        return BallMass(0.5 * (math.erf(hi) - math.erf(lo)), 0.0, 0)
    rng = np.random.default_rng(seed)
    draws = mean + s * rng.standard_normal((int(n_samples), dim))
    hits = np.linalg.norm(draws - c, axis=1) <= tau
    p = float(hits.mean())
    se = math.sqrt(p * (1.0 - p) / n_samples)
    return BallMass(p, se, int(n_samples))


# ------------------------------------------------------ per-vertex volumes


@dataclass(frozen=True)
class VertexAlpha:
    """One vertex's volume fraction and the factors composing it.

    ``degree_probs`` holds ``(base parent, in-degree, lambda, probability)``
    per parent class; ``ball_masses`` holds ``(parent vertex, mass)`` per
    in-edge. Input vertices have ``normalizer 1`` and no factors.
    """

    vertex: int
    base_vertex: int
    normalizer: float
    degree_probs: tuple[tuple[int, int, float, float], ...]
    ball_masses: tuple[tuple[int, float], ...]
    value: float


@dataclass(frozen=True)
class AlphaParams:
    """Per-witness-vertex volume fractions at one matching tolerance."""

    eta: float
    values: tuple[float, ...]
    breakdown: tuple[VertexAlpha, ...]

    def __getitem__(self, vertex: int) -> float:
        return self.values[vertex]

    def as_map(self) -> dict[int, float]:
        return {v: a for v, a in enumerate(self.values)}

    def min(self) -> float:
        return min(self.values)


def _per_edge(values, n_edges: int, what: str) -> list:
    if isinstance(values, Mapping):
        out = [values[i] for i in range(n_edges)]
    else:
        out = list(values)
    if len(out) != n_edges:
        raise ValueError(f"need one {what} per base edge, got {len(out)} for {n_edges}")
    return out


def _per_vertex(values, n_vertices: int, what: str) -> list:
    if isinstance(values, Mapping):
        out = [values[i] for i in range(n_vertices)]
    else:
        out = list(values)
    if len(out) != n_vertices:
        raise ValueError(f"need one {what} per base vertex, got {len(out)} for {n_vertices}")
    return out


def alpha_parameter(
    lm_star: LiftedModule,
    w_star: Section,
    lam: Mapping[int, float] | Sequence[float],
    eta: float,
    n: Mapping[int, int] | Sequence[int],
    dists: Mapping[int, WeightDist] | None = None,
    ball_samples: int = 100_000,
    ball_seed: int = 0,
) -> AlphaParams:
    """Recursive volume fraction of every witness vertex at tolerance ``eta``.

    An input vertex in a lift class of width ``n_b`` gets ``1/n_b``. Every
    other vertex multiplies, over parent classes, the probability of drawing
    its exact in-degree from a Poisson law of rate ``lam``, and over parents,
    the mass of the ``eta``-ball around the incoming witness weight times the
    parent's own fraction; the product is divided by
    ``2^(1 + #parent classes) * (witness class size)``.

    ``lam`` and ``dists`` are indexed by canonical base edge, ``n`` by base
    vertex (the lift widths; only input widths enter the recursion).
    """
    if not eta > 0.0:
        raise NonPositiveRadius(f"matching tolerance must be positive, got {eta}")
    base = lm_star.blueprint.base
    lam_e = [float(v) for v in _per_edge(lam, base.n_edges, "lambda")]
    n_v = [int(v) for v in _per_vertex(n, base.n_vertices, "width")]
    pis = lm_star.projection
    g = lm_star.lifted
    values: list[float] = [0.0] * g.n_vertices
    breakdown: list[VertexAlpha] = []
    class_size = [len(pis.preimage(b)) for b in range(base.n_vertices)]

    for v in topological_order(g):
        b = pis(v)
        if b in lm_star.blueprint.initial:
            values[v] = 1.0 / n_v[b]
            breakdown.append(VertexAlpha(v, b, 1.0, (), (), values[v]))
            continue
        norm = 2.0 ** (1 + len(base.parents(b))) * class_size[b]
        acc = 1.0 / norm
        degs: list[tuple[int, int, float, float]] = []
        for a in base.parents(b):
            k = sum(1 for u in g.parents(v) if pis(u) == a)
            rate = lam_e[base.edge_index(a, b)]
            prob = math.exp(-rate) * rate**k / math.factorial(k)
            degs.append((a, k, rate, prob))
            acc *= prob
        masses: list[tuple[int, float]] = []
        for u in g.parents(v):
            eidx = base.edge_index(pis(u), b)
            dist = (dists or {}).get(eidx, WeightDist())
            mass = gaussian_ball_mass(
                dist, w_star.values[g.edge_index(u, v)], eta,
                n_samples=ball_samples, seed=ball_seed,
            ).value
            masses.append((u, mass))
            acc *= mass * values[u]
        values[v] = acc
        breakdown.append(VertexAlpha(v, b, norm, tuple(degs), tuple(masses), acc))

    breakdown.sort(key=lambda va: va.vertex)
    return AlphaParams(eta=float(eta), values=tuple(values), breakdown=tuple(breakdown))


# ------------------------------------------------------ continuity bracket


def _edge_deviation(prim, w0: np.ndarray, y0: np.ndarray, eta: float, r: float) -> float:
    """Certified bound on the edge output's shift when the weight moves by at
    most ``eta`` and the parent activation by at most ``r``."""
    name = prim.name
    if name in ("mul", "pair", "tensor", "matvec"):
        # bilinear: |M(w,y) - M(w0,y0)| <= |w| |y - y0| + |w - w0| |y0|,
        # with the operator norm dominated by the Frobenius norm for matvec
        wn = float(np.linalg.norm(w0))
        yn = float(np.linalg.norm(y0))
        return (wn + eta) * r + eta * yn
    if name == "identity":
        return r
    if name == "conv2d_nopad":
        (h, w), (kh, kw), (oh, ow) = _conv_shapes(prim.params)
        scale = math.sqrt(oh * ow)
        wn = float(np.linalg.norm(w0))
        yn = float(np.linalg.norm(y0))
        return scale * ((wn + eta) * r + eta * yn)
    raise UnsupportedPrimitive(f"no certified continuity rule for edge primitive {name!r}")


def _conv_shapes(p):
    h, w = (int(s) for s in p["in_shape"])
    kh, kw = (int(s) for s in p["kernel"])
    return (h, w), (kh, kw), (h - kh + 1, w - kw + 1)


def _vertex_deviation(
    prim, args0: tuple[np.ndarray, ...], slot_dev: list[float], slot_prims: list[set[str]]
) -> float:
    """Certified bound on the activation's shift given per-class input shifts."""
    name = prim.name
    if name == "const_one":
        return 0.0
    if name in ("sum_identity", "sum_relu", "sum_tanh", "sum_sin"):
        # classes are summed, then an elementwise map with |slope| <= 1
        return sum(slot_dev)
    if name == "max_reduce":
        # max and relu-then-max are both 1-Lipschitz in the sup norm
        return slot_dev[0]
    if name == "scaled_bias":
        i, j = (0, 1) if args0[0].shape[0] == 2 else (1, 0)
        if slot_prims[i] - {"pair"}:
            raise UnsupportedPrimitive(
                "scaled_bias has a certified rule only when its (value, count) "
                f"class is fed by pair edges, got {sorted(slot_prims[i])}"
            )
        count = args0[i][1]
        if count <= 0.0:
            return slot_dev[j]
        # pair edges keep the count coordinate constant, so only the value
        # coordinate moves: x/sqrt(n) is (1/sqrt(n))-Lipschitz at fixed n
        return slot_dev[i] / math.sqrt(count) + slot_dev[j]
    if name == "outer_product":
        nn = int(prim.params["n"])
        q, k = args0[0][:nn], args0[0][nn:]
        d = slot_dev[0]
        return d * (float(np.linalg.norm(q)) + float(np.linalg.norm(k)) + d)
    if name == "add_soft_mul":
        nn = int(prim.params["n"])
        y = args0[0][nn:]
        d_xy, d_a = slot_dev
        # softmax rows are 1/2-Lipschitz; row-stochastic matrices have
        # operator norm at most sqrt(n)
        return d_xy * (1.0 + math.sqrt(nn)) + 0.5 * d_a * (float(np.linalg.norm(y)) + d_xy)
    raise UnsupportedPrimitive(f"no certified continuity rule for vertex primitive {name!r}")


@dataclass(frozen=True)
class ContinuityBracket:
    """Two-sided estimate of the worst activation shift under weight noise.

    ``upper`` is certified by per-primitive Lipschitz propagation; ``lower``
    is the best shift found by sampling weights on the tolerance sphere and
    parent activations on their already-established lower-radius spheres.
    Both are per lifted vertex, maximized over the input sample; ``certified``
    and ``sampled`` are the overall maxima. ``sampled <= certified`` always.
    """

    eta: float
    upper: tuple[float, ...]
    lower: tuple[float, ...]
    certified: float
    sampled: float


def _sphere(rng: np.random.Generator, dim: int, radius: float) -> np.ndarray:
    if dim == 0 or radius == 0.0:
        return np.zeros(dim)
    d = rng.standard_normal(dim)
    nrm = np.linalg.norm(d)
    if nrm == 0.0:  # pragma: no cover - measure zero
        d[0] = 1.0
        nrm = 1.0
    return (radius / nrm) * d


def continuity_bound(
    lm: LiftedModule,
    w: Section,
    eta: float,
    X: Sequence[Mapping[str, np.ndarray]],
    n_samples: int = 64,
    seed: int = 0,
) -> ContinuityBracket:
    """Bracket the per-vertex activation shift when every edge weight may move
    by at most ``eta``.

    The shift at a vertex is measured against the worst shifts of its parents,
    propagated in topological order from zero at the inputs. ``n_samples = 0``
    skips the Monte Carlo lower estimate (it is then identically zero).

    Raises:
        UnsupportedPrimitive: a primitive in the module has no certified rule.
    """
    if eta < 0.0:
        raise ValueError(f"tolerance must be nonnegative, got {eta}")
    if not X:
        raise ValueError("need at least one input point")
    g = lm.lifted
    upper = [0.0] * g.n_vertices
    lower = [0.0] * g.n_vertices
    rng = np.random.default_rng(seed)
    do_mc = n_samples > 0 and eta > 0.0
    is_input = [lm.projection(v) in lm.blueprint.initial for v in range(g.n_vertices)]

    for x in X:
        acts = forward(lm, w, x)
        up_x = [0.0] * g.n_vertices
        low_x = [0.0] * g.n_vertices
        for v in lm._topo:
            if is_input[v]:
                continue
            bv, rows, class_dims = lm._wiring[v]
            sigma = lm._sigma_prims[bv]
            n_slots = len(class_dims)
            args0: list[np.ndarray] = [np.zeros(d) for d in class_dims]
            slot_dev = [0.0] * n_slots
            slot_prims: list[set[str]] = [set() for _ in range(n_slots)]
            for u, eidx, bidx, slot in rows:
                prim = lm._m_prims[bidx]
                args0[slot] = args0[slot] + prim.eval(w.values[eidx], acts.values[u])
                slot_dev[slot] += _edge_deviation(
                    prim, w.values[eidx], acts.values[u], eta, up_x[u]
                )
                slot_prims[slot].add(prim.name)
            base0 = sigma.eval(*args0)
            up_x[v] = _vertex_deviation(sigma, tuple(args0), slot_dev, slot_prims)
            if do_mc:
                worst = 0.0
                for _ in range(n_samples):
                    args = [np.zeros(d) for d in class_dims]
                    for u, eidx, bidx, slot in rows:
                        prim = lm._m_prims[bidx]
                        we = w.values[eidx] + _sphere(rng, w.values[eidx].shape[0], eta)
                        gu = acts.values[u] + _sphere(
                            rng, acts.values[u].shape[0], low_x[u]
                        )
                        args[slot] = args[slot] + prim.eval(we, gu)
                    shift = float(np.linalg.norm(sigma.eval(*args) - base0))
                    worst = max(worst, shift)
                low_x[v] = worst
        upper = [max(a, b) for a, b in zip(upper, up_x)]
        lower = [max(a, b) for a, b in zip(lower, low_x)]

    return ContinuityBracket(
        eta=float(eta),
        upper=tuple(upper),
        lower=tuple(lower),
        certified=max(upper),
        sampled=max(lower),
    )


# -------------------------------------------------------- quota selection


def disjoint_quota_select(
    sets: Sequence[Iterable], quotas: Sequence[int]
) -> list[set]:
    """Pick disjoint subsets ``V_i`` of the candidate sets with ``#V_i >= q_i``.

    Runs augmenting-path bipartite matching between quota slots and ground
    elements, processing slots in index order and preferring free elements in
    ascending order, so the result is deterministic and the earliest index
    keeps the smallest elements its quota allows.

    Raises:
        Infeasible: no disjoint system exists; the error carries a family of
            indices whose quotas exceed their candidates' union.
    """
    if len(sets) != len(quotas):
        raise ValueError("one quota per candidate set")
    cands = [sorted(set(s)) for s in sets]
    quotas = [int(q) for q in quotas]
    if any(q < 0 for q in quotas):
        raise ValueError("quotas must be nonnegative")

    owner: dict = {}  # element -> index currently holding it
    taken: list[set] = [set() for _ in cands]

    def augment(idx: int, visited: set) -> bool:
        # acquire one more element for `idx`, stealing along alternating
        # paths; free elements first, ascending, for a canonical result
        for e in cands[idx]:
            if e not in owner and e not in visited:
                visited.add(e)
                owner[e] = idx
                taken[idx].add(e)
                return True
        for e in cands[idx]:
            if e in visited:
                continue
            visited.add(e)
            h = owner[e]
            if augment(h, visited):
                taken[h].remove(e)
                owner[e] = idx
                taken[idx].add(e)
                return True
        return False

    for i in range(len(cands)):
        for _ in range(quotas[i]):
            if not augment(i, set()):
                # close the failing index over current owners: the closed
                # family's quotas exceed its candidates' union
                fam = {i}
                while True:
                    union = set()
                    for j in fam:
                        union.update(cands[j])
                    grown = fam | {owner[e] for e in union if e in owner}
                    if grown == fam:
                        break
                    fam = grown
                raise Infeasible(
                    frozenset(fam), sum(quotas[j] for j in fam), len(union)
                )
    return taken


# ------------------------------------------------------- partial morphisms


@dataclass(frozen=True)
class PartialMorphism:
    """A witness matching: matched lift vertices and their images.

    ``pairs`` lists ``(lift vertex, witness vertex)`` in ascending lift id;
    the matched subgraph is the induced one on the listed lift vertices
    together with all their in-edges. ``alpha`` stores the per-witness-vertex
    volume fractions the matching claims to satisfy.
    """

    pairs: tuple[tuple[int, int], ...]
    eta: float
    alpha: tuple[tuple[int, float], ...]

    def __post_init__(self):
        object.__setattr__(
            self, "pairs", tuple(sorted((int(a), int(b)) for a, b in self.pairs))
        )
        object.__setattr__(
            self, "alpha", tuple(sorted((int(v), float(a)) for v, a in self.alpha))
        )
        if len({a for a, _ in self.pairs}) != len(self.pairs):
            raise ValueError("each lift vertex may be matched at most once")

    @property
    def vertices(self) -> tuple[int, ...]:
        return tuple(a for a, _ in self.pairs)

    def assignment(self) -> dict[int, int]:
        return dict(self.pairs)

    def preimages(self) -> dict[int, tuple[int, ...]]:
        out: dict[int, list[int]] = {}
        for a, b in self.pairs:
            out.setdefault(b, []).append(a)
        return {b: tuple(vs) for b, vs in out.items()}

    def alpha_map(self) -> dict[int, float]:
        return dict(self.alpha)

    def to_json(self) -> str:
        return json.dumps(
            {
                "eta": self.eta,
                "pairs": [list(p) for p in self.pairs],
                "alpha": {str(v): a for v, a in self.alpha},
            }
        )

    @classmethod
    def from_json(cls, text: str) -> "PartialMorphism":
        doc = json.loads(text)
        return cls(
            pairs=tuple((int(a), int(b)) for a, b in doc["pairs"]),
            eta=float(doc["eta"]),
            alpha=tuple((int(v), float(a)) for v, a in doc["alpha"].items()),
        )


@dataclass(frozen=True)
class NotFound:
    """Search failure: the witness vertex whose candidates ran out, and why."""

    vertex: int
    reason: str


@dataclass(frozen=True)
class CoveringReport:
    ok: bool
    violations: tuple[str, ...]


def _alpha_pairs(alpha, lm_star: LiftedModule) -> tuple[tuple[int, float], ...]:
    if isinstance(alpha, AlphaParams):
        return tuple(enumerate(alpha.values))
    if isinstance(alpha, Mapping):
        return tuple(sorted((int(v), float(a)) for v, a in alpha.items()))
    return tuple(enumerate(float(a) for a in alpha))


def _quota(alpha_v: float, class_size: int) -> int:
    return max(0, math.ceil(alpha_v * class_size - _VOLUME_TOL))


def find_covering_morphism(
    lm: LiftedModule,
    w: Section,
    lm_star: LiftedModule,
    w_star: Section,
    alpha,
    eta: float,
) -> Union[PartialMorphism, NotFound]:
    """Search for a covering matching of the witness inside the lift.

    Witness input vertices are matched to the lift inputs carrying the same
    name. Every later witness vertex's candidates are the lift vertices of its
    class whose typed parents are already matched, map one-to-one onto the
    witness vertex's parents, and agree with the witness weights within
    ``eta`` edge by edge; disjoint preimages meeting the volume quotas are
    then selected class by class in base topological order.

    ``alpha`` may be an :class:`AlphaParams`, a mapping, or a sequence over
    witness vertices. Returns a :class:`PartialMorphism`, or :class:`NotFound`
    naming a witness vertex whose quota cannot be met.
    """
    if lm.blueprint != lm_star.blueprint:
        raise ValueError("lift and witness must share a blueprint")
    base = lm.blueprint.base
    pi, pis = lm.projection, lm_star.projection
    alpha_map = dict(_alpha_pairs(alpha, lm_star))
    gs = lm_star.lifted
    g = lm.lifted

    assign: dict[int, int] = {}
    lift_by_name = {name: v for v, name in lm.naming}
    for u, name in lm_star.naming:
        quota = _quota(alpha_map[u], len(pi.preimage(pis(u))))
        if quota > 1:
            return NotFound(u, f"input quota {quota} exceeds the single copy named {name!r}")
        v = lift_by_name.get(name)
        if v is None:
            return NotFound(u, f"lift has no input named {name!r}")
        if quota > 0:
            assign[v] = u

    for b in topological_order(base):
        if b in lm.blueprint.initial:
            continue
        targets = [i for i in pis.preimage(b)]
        if not targets:
            continue
        lift_class = pi.preimage(b)
        cands: list[set[int]] = []
        for i in targets:
            star_parents = {a: [] for a in base.parents(b)}
            for u in gs.parents(i):
                star_parents[pis(u)].append(u)
            good: set[int] = set()
            for j in lift_class:
                if _candidate(lm, w, lm_star, w_star, assign, j, i, star_parents, eta):
                    good.add(j)
            cands.append(good)
        quotas = [_quota(alpha_map[i], len(lift_class)) for i in targets]
        try:
            chosen = disjoint_quota_select(cands, quotas)
        except Infeasible as exc:
            deficits = [
                (len(cands[k]) - quotas[k], targets[k])
                for k in sorted(exc.indices)
            ]
            blocked = min(deficits)[1]
            return NotFound(blocked, str(exc))
        for i, picked in zip(targets, chosen):
            for j in picked:
                assign[j] = i

    pairs = tuple(sorted(assign.items()))
    return PartialMorphism(pairs=pairs, eta=float(eta), alpha=_alpha_pairs(alpha_map, lm_star))


def _candidate(
    lm: LiftedModule,
    w: Section,
    lm_star: LiftedModule,
    w_star: Section,
    assign: Mapping[int, int],
    j: int,
    i: int,
    star_parents: Mapping[int, list[int]],
    eta: float,
) -> bool:
    """Whether mapping lift vertex ``j`` onto witness vertex ``i`` keeps the
    matching a weight-compatible fibration."""
    pi = lm.projection
    g, gs = lm.lifted, lm_star.lifted
    by_class: dict[int, list[int]] = {a: [] for a in star_parents}
    for u in g.parents(j):
        a = pi(u)
        if a not in by_class:
            return False
        by_class[a].append(u)
    for a, wanted in star_parents.items():
        mine = by_class[a]
        if len(mine) != len(wanted):
            return False
        images = []
        for u in mine:
            t = assign.get(u)
            if t is None:
                return False
            images.append(t)
        if sorted(images) != sorted(wanted) or len(set(images)) != len(images):
            return False
        for u, t in zip(mine, images):
            dw = w.values[g.edge_index(u, j)] - w_star.values[gs.edge_index(t, i)]
            if np.linalg.norm(dw) > eta:
                return False
    return True


def verify_covering(
    pm: PartialMorphism,
    lm: LiftedModule,
    w: Section,
    lm_star: LiftedModule,
    w_star: Section,
) -> CoveringReport:
    """Check every invariant of a covering matching and list violations.

    Checks, in order: the matched vertex set is parent-closed in the lift
    (so its inclusion is a fibration); the map is a fibration onto the
    witness respecting projection and input names; every matched edge weight
    is within ``pm.eta`` of its image; every witness vertex has at least
    ``alpha * lift class size`` preimages (within float tolerance).
    """
    g, gs = lm.lifted, lm_star.lifted
    pi, pis = lm.projection, lm_star.projection
    assign = pm.assignment()
    bad: list[str] = []

    for v in pm.vertices:
        for u in g.parents(v):
            if u not in assign:
                bad.append(f"matched vertex {v} has unmatched parent {u}")

    star_names = dict(lm_star.naming)
    lift_names = dict(lm.naming)
    for v, t in pm.pairs:
        if pi(v) != pis(t):
            bad.append(f"vertex {v} (class {pi(v)}) maps to {t} (class {pis(t)})")
            continue
        if v in lift_names and lift_names[v] != star_names.get(t):
            bad.append(
                f"input {v} named {lift_names[v]!r} maps to {t} "
                f"named {star_names.get(t)!r}"
            )
        mine = [u for u in g.parents(v) if u in assign]
        images = [assign[u] for u in mine]
        wanted = list(gs.parents(t))
        if sorted(images) != sorted(wanted) or len(set(images)) != len(images):
            bad.append(
                f"parents of {v} map to {sorted(images)}, "
                f"parents of image {t} are {wanted}"
            )
            continue
        for u in mine:
            dw = w.values[g.edge_index(u, v)] - w_star.values[gs.edge_index(assign[u], t)]
            gap = float(np.linalg.norm(dw))
            if gap > pm.eta:
                bad.append(
                    f"edge ({u},{v}) weight is {gap:.3e} from its image, "
                    f"tolerance {pm.eta:.3e}"
                )

    counts: dict[int, int] = {}
    for _, t in pm.pairs:
        counts[t] = counts.get(t, 0) + 1
    alpha_map = pm.alpha_map()
    for t in range(gs.n_vertices):
        need = alpha_map.get(t, 0.0) * len(pi.preimage(pis(t)))
        if counts.get(t, 0) < need - _VOLUME_TOL:
            bad.append(
                f"witness vertex {t} has {counts.get(t, 0)} preimages, "
                f"needs at least {need:.6g}"
            )

    return CoveringReport(ok=not bad, violations=tuple(bad))


def covering_probability_bound(
    lm_star: LiftedModule,
    alpha,
    n: Mapping[int, int] | Sequence[int],
) -> float:
    """Lower bound on the probability that a random sparse lift of widths
    ``n`` admits a covering matching of the witness.

    Multiplies, over non-input base vertices ``b``, the clamped complement of
    the per-class failure masses ``exp(-tau^2/4 * n_b * alpha(v))`` where
    ``tau = (1 - 1/(n_b * alpha(v)))_+``.
    """
    base = lm_star.blueprint.base
    n_v = [int(x) for x in _per_vertex(n, base.n_vertices, "width")]
    alpha_map = dict(_alpha_pairs(alpha, lm_star))
    pis = lm_star.projection
    out = 1.0
    for b in range(base.n_vertices):
        if b in lm_star.blueprint.initial:
            continue
        fail = 0.0
        for v in pis.preimage(b):
            mass = n_v[b] * alpha_map[v]
            tau = max(0.0, 1.0 - 1.0 / mass) if mass > 0 else 0.0
            fail += math.exp(-(tau**2) / 4.0 * mass)
        out *= max(0.0, 1.0 - fail)
    return out


def admissible_width(n: int, lam: float) -> bool:
    """Source width large enough for the sparse in-degree law to dominate a
    halved Poisson law."""
    return n >= max(2.0 * lam, 2.0 * lam * lam / math.log(2.0))


def poisson_floor(n: int, lam: float, k: int) -> tuple[float, float]:
    """The pair ``((1 - lam/n)^(n-k), exp(-lam)/2)``; the first dominates the
    second whenever ``admissible_width(n, lam)`` holds and ``0 <= k <= n``."""
    return (1.0 - lam / n) ** (n - k), 0.5 * math.exp(-lam)


# ------------------------------------------------------------ tangent gap


@dataclass(frozen=True)
class TangentGap:
    """Measured quality of the readout direction a covering matching induces.

    ``direction`` rescales the witness readout onto matched terminals;
    ``empirical_error`` is the sample norm of the resulting linear model's
    residual, to be compared against ``error_bound = witness_error +
    c_star * continuity``. ``kappa_bound`` bounds the direction's norm budget.
    """

    empirical_error: float
    witness_error: float
    c_star: float
    continuity: float
    error_bound: float
    kappa_bound: float
    within_bound: bool
    direction: ReadoutCoeffs


def _d_norm(residuals: np.ndarray) -> float:
    r = np.asarray(residuals, dtype=np.float64)
    if r.ndim == 1:
        r = r[:, None]
    return float(np.sqrt(np.mean(np.sum(r * r, axis=1))))


def tangent_gap(
    lm: LiftedModule,
    w: Section,
    a: ReadoutCoeffs,
    lm_star: LiftedModule,
    w_star: Section,
    a_star: ReadoutCoeffs,
    pm: PartialMorphism,
    X: Sequence[Mapping[str, np.ndarray]],
    f_star: np.ndarray,
    continuity: float | None = None,
) -> TangentGap:
    """Evaluate the linearized-error guarantee a verified matching provides.

    Builds the readout direction that spreads each witness terminal's
    coefficients uniformly over its preimages (zero elsewhere), measures the
    linear model's residual against targets ``f_star`` over the sample, and
    compares with the witness residual plus the certified continuity term.
    ``continuity`` overrides the certified constant when already computed.

    Raises:
        UnverifiedMorphism: ``pm`` fails :func:`verify_covering`.
    """
    report = verify_covering(pm, lm, w, lm_star, w_star)
    if not report.ok:
        raise UnverifiedMorphism("; ".join(report.violations))
    a_star.check_against(lm_star)
    pis = lm_star.projection
    pi = lm.projection
    alpha_map = pm.alpha_map()

    star_class = {b: len(pis.preimage(b)) for b in range(lm.blueprint.base.n_vertices)}
    lift_class = {b: len(pi.preimage(b)) for b in range(lm.blueprint.base.n_vertices)}
    preimages = pm.preimages()
    assign = pm.assignment()

    pos = {v: i for i, v in enumerate(a_star.vertices)}
    k = a_star.k
    rows = []
    for v in lm.terminal_vertices:
        t = assign.get(v)
        if t is None:
            rows.append(np.zeros((k, lm.activation_bundle.dims[v])))
            continue
        b = pi(v)
        s_v = len(preimages[t]) * math.sqrt(star_class[b] / lift_class[b])
        rows.append(a_star.rows[pos[t]] / s_v)
    direction = ReadoutCoeffs(k, lm.terminal_vertices, tuple(rows))

    f = np.asarray(f_star, dtype=np.float64)
    if f.ndim == 1:
        f = f[:, None]
    star_pred = np.array(
        [linear_readout(a_star, forward(lm_star, w_star, x), lm_star) for x in X]
    )
    lift_pred = np.array([linear_readout(direction, forward(lm, w, x), lm) for x in X])
    witness_error = _d_norm(star_pred - f)
    empirical = _d_norm(lift_pred - f)

    c_star = 0.0
    kappa_sq = 0.0
    for v in a_star.vertices:
        b = pis(v)
        nrm = np.linalg.norm(a_star.rows[pos[v]], axis=1)
        c_star += float(nrm.sum()) / math.sqrt(star_class[b])
        kappa_sq += float((nrm**2).sum()) / (alpha_map[v] * star_class[b])
    kappa = float(np.linalg.norm(a.to_flat())) + math.sqrt(kappa_sq)

    if continuity is None:
        continuity = continuity_bound(lm_star, w_star, pm.eta, X, n_samples=0).certified
    bound = witness_error + c_star * continuity
    return TangentGap(
        empirical_error=empirical,
        witness_error=witness_error,
        c_star=c_star,
        continuity=float(continuity),
        error_bound=bound,
        kappa_bound=kappa,
        within_bound=empirical <= bound + _VOLUME_TOL,
        direction=direction,
    )


# ------------------------------------------------------ threshold constants


@dataclass(frozen=True)
class TheoryReport:
    """Constants certifying convergence of large enough sparse lifts.

    ``n1`` maps base vertices to the width threshold above which the
    guarantee holds with probability ``1 - delta``; fractional entries round
    up. The flags record whether the stated size assumptions hold at those
    thresholds (inputs use the witness input class sizes).
    """

    epsilon: float
    delta: float
    epsilon0: float
    c_star: float
    eta: float
    lam: tuple[float, ...]
    big_lambda: float
    alpha: AlphaParams
    c: float
    kappa: float
    f_star_norm: float
    n1: tuple[float, ...]
    input_lambda_ok: bool
    growth_ok: bool
    poisson_ok: bool

    def to_json(self, indent: int | None = 2) -> str:
        doc = {
            "epsilon": self.epsilon,
            "delta": self.delta,
            "witness_loss": self.epsilon0,
            "readout_mass": self.c_star,
            "matching_tolerance": self.eta,
            "lambda": list(self.lam),
            "degree_budget": self.big_lambda,
            "alpha": {
                "eta": self.alpha.eta,
                "values": list(self.alpha.values),
            },
            "intercept": self.c,
            "rate_constant": self.kappa,
            "target_norm": self.f_star_norm,
            "min_widths": list(self.n1),
            "flags": {
                "input_lambda_ok": self.input_lambda_ok,
                "growth_ok": self.growth_ok,
                "poisson_ok": self.poisson_ok,
            },
        }
        return json.dumps(doc, indent=indent)


def threshold_constants(
    lm_star: LiftedModule,
    w_star: Section,
    a_star: ReadoutCoeffs,
    lam: Mapping[int, float] | Sequence[float],
    delta: float,
    epsilon: float,
    f_star_norm: float,
    X: Sequence[Mapping[str, np.ndarray]],
    f_star: np.ndarray | None = None,
    witness_loss: float | None = None,
    dists: Mapping[int, WeightDist] | None = None,
    eta_rel_tol: float = 1e-6,
    max_bisect: int = 60,
) -> TheoryReport:
    """Evaluate the main guarantee's constants for one witness.

    The matching tolerance ``eta`` is the largest tolerance keeping the
    certified continuity constant below the error headroom
    ``(sqrt((eps + eps0)/2) - sqrt(eps0)) / c_star``, found by doubling then
    bisecting (the certified constant is monotone). The witness loss is
    ``witness_loss`` if given, otherwise computed from targets ``f_star``.

    Raises:
        EpsilonBelowWitness: ``epsilon`` does not exceed the witness loss.
    """
    if not 0.0 < delta <= 1.0:
        raise ValueError(f"confidence level must lie in (0, 1], got {delta}")
    base = lm_star.blueprint.base
    lam_e = [float(v) for v in _per_edge(lam, base.n_edges, "lambda")]

    if witness_loss is None:
        if f_star is None:
            raise ValueError("need targets or an explicit witness loss")
        f = np.asarray(f_star, dtype=np.float64)
        if f.ndim == 1:
            f = f[:, None]
        pred = np.array(
            [linear_readout(a_star, forward(lm_star, w_star, x), lm_star) for x in X]
        )
        witness_loss = float(np.mean(np.sum((pred - f) ** 2, axis=1)))
    eps0 = float(witness_loss)
    if not epsilon > eps0:
        raise EpsilonBelowWitness(
            f"target error {epsilon} must exceed the witness loss {eps0}"
        )

    pis = lm_star.projection
    star_class = {b: len(pis.preimage(b)) for b in range(base.n_vertices)}
    pos = {v: i for i, v in enumerate(a_star.vertices)}
    c_star = 0.0
    for v in a_star.vertices:
        nrm = np.linalg.norm(a_star.rows[pos[v]], axis=1)
        c_star += float(nrm.sum()) / math.sqrt(star_class[pis(v)])

    headroom = math.inf
    if c_star > 0.0:
        headroom = (math.sqrt((epsilon + eps0) / 2.0) - math.sqrt(eps0)) / c_star

    def certified(eta: float) -> float:
        return continuity_bound(lm_star, w_star, eta, X, n_samples=0).certified

    lo, hi = 0.0, 1.0
    for _ in range(max_bisect):
        if certified(hi) >= headroom:
            break
        lo, hi = hi, hi * 2.0
    else:
        lo = hi  # headroom never reached; any tolerance in range works
    while hi - lo > eta_rel_tol * hi and max_bisect > 0:
        mid = 0.5 * (lo + hi)
        if certified(mid) < headroom:
            lo = mid
        else:
            hi = mid
        max_bisect -= 1
    eta = lo if lo > 0.0 else eta_rel_tol

    log_term = math.log(lm_star.lifted.n_vertices + base.n_edges)
    big_lambda = sum(
        7.0 * le + 1.0 + math.log(2.0) + log_term - math.log(delta) for le in lam_e
    )

    n0 = {b: star_class[b] for b in lm_star.blueprint.initial}
    alpha = alpha_parameter(
        lm_star, w_star, lam_e, eta / 2.0,
        n={b: n0.get(b, max(n0.values(), default=1)) for b in range(base.n_vertices)},
        dists=dists,
    )

    # alpha can underflow to exactly zero at extreme rates; the constants are
    # then genuinely unbounded, which the report states as inf rather than
    # failing on the division
    c_sq = 0.0
    for v in a_star.vertices:
        nrm = np.linalg.norm(a_star.rows[pos[v]], axis=1)
        term = float((2.0 * nrm**2).sum())
        mass = alpha[v] * star_class[pis(v)]
        if term == 0.0:
            continue
        c_sq = math.inf if mass == 0.0 else c_sq + term / mass
    c = math.sqrt(c_sq)
    denom = c * c * f_star_norm**4
    if not math.isfinite(denom):
        kappa = 0.0
    elif denom == 0.0:
        kappa = math.inf
    else:
        kappa = 3.0 / denom

    alpha_min = alpha.min()
    n1: list[float] = []
    if c == 0.0 or not math.isfinite(c) or eps0 >= epsilon or alpha_min <= 0.0:
        body = math.inf
    else:
        body = (
            8.0
            * (1.0 + (4.0 * c / eta) * f_star_norm**2 / (epsilon - eps0)) ** 2
            * (1.0 + big_lambda) ** (1 + base.n_vertices)
            / alpha_min
        )
    for b in range(base.n_vertices):
        if b in lm_star.blueprint.initial:
            n1.append(float(n0[b]))
        else:
            n1.append(float(math.ceil(body)) if math.isfinite(body) else math.inf)

    input_ok = all(
        lam_e[base.edge_index(a, b)] <= min(n0[a] / 2.0, math.sqrt(n0[a] / 3.0))
        for a, b in base.edges
        if a in lm_star.blueprint.initial
    )
    growth_ok = all(
        n1[b] >= n1[a] * math.log(n1[a]) if n1[a] > 0 else False
        for a, b in base.edges
    )
    poisson_ok = all(
        admissible_width(n1[a], lam_e[base.edge_index(a, b)]) for a, b in base.edges
    )

    return TheoryReport(
        epsilon=float(epsilon),
        delta=float(delta),
        epsilon0=eps0,
        c_star=c_star,
        eta=float(eta),
        lam=tuple(lam_e),
        big_lambda=float(big_lambda),
        alpha=alpha,
        c=c,
        kappa=kappa,
        f_star_norm=float(f_star_norm),
        n1=tuple(n1),
        input_lambda_ok=input_ok,
        growth_ok=growth_ok,
        poisson_ok=poisson_ok,
    )
