"""Lifted modules: lifting, forward evaluation, readout, morphism commutation."""

import numpy as np
import pytest

from liftlab.blueprints import (
    Blueprint,
    OpRef,
    bundled_blueprint_path,
    load_blueprint_file,
)
from liftlab.bundles import Bundle, Section
from liftlab.graphs import Graph, VertexMap, identity_map, compose_maps
from liftlab.modules import (
    BadHomomorphism,
    BadInputNaming,
    LiftedModule,
    MissingInput,
    ReadoutCoeffs,
    ShapeMismatch,
    forward,
    fully_connected_lift,
    lift_module,
    linear_readout,
    pullback_edge_section,
)


def mlp_blueprint() -> Blueprint:
    return load_blueprint_file(bundled_blueprint_path("mlp3")).blueprint


def sine_blueprint() -> Blueprint:
    return load_blueprint_file(bundled_blueprint_path("sine")).blueprint


def single_edge_blueprint() -> Blueprint:
    return Blueprint(
        base=Graph(2, [(0, 1)]),
        initial=frozenset({0}),
        terminal=frozenset({1}),
        y_dims=Bundle((1, 1)),
        z_dims=Bundle((1,)),
        w_dims=Bundle((1,)),
        m_ops=(OpRef.of("mul"),),
        sigma_ops={1: OpRef.of("sum_identity")},
    )


class TestLiftModule:
    def test_identity_lift_reproduces_base(self):
        b = single_edge_blueprint()
        lm = lift_module(b, b.base, identity_map(b.base), {0: "x"})
        w = Section(lm.weight_bundle, [np.array([2.0])])
        acts = forward(lm, w, {"x": np.array([3.0])})
        assert acts[1][0] == 6.0

    def test_duplicate_names_rejected(self):
        b = mlp_blueprint()
        lifted = fully_connected_lift(b, (3, 5, 6, 4))
        with pytest.raises(BadInputNaming, match="injective"):
            lift_module(b, lifted.lifted, lifted.projection, {0: "x", 1: "x", 2: "y"})

    def test_partial_naming_rejected(self):
        b = mlp_blueprint()
        lifted = fully_connected_lift(b, (3, 5, 6, 4))
        with pytest.raises(BadInputNaming, match="cover exactly"):
            lift_module(b, lifted.lifted, lifted.projection, {0: "x"})

    def test_name_typing_checked(self):
        b = single_edge_blueprint()
        with pytest.raises(BadInputNaming, match="typed over"):
            lift_module(b, b.base, identity_map(b.base), {0: "x"}, name_types={"x": 1})

    def test_non_homomorphism_rejected(self):
        b = single_edge_blueprint()
        g = Graph(2, [(1, 0)])
        with pytest.raises(BadHomomorphism):
            lift_module(b, g, VertexMap(g, b.base, (0, 1)), {0: "x"})

    def test_zero_width_class_rejected(self):
        b = single_edge_blueprint()
        g = Graph(1, [])
        with pytest.raises(ValueError, match="no lifted copies"):
            lift_module(b, g, VertexMap(g, b.base, (0,)), {0: "x"})


class TestFullyConnectedLift:
    def test_mlp_shape(self):
        lm = fully_connected_lift(mlp_blueprint(), (3, 5, 6, 4))
        assert lm.lifted.n_vertices == 18
        assert lm.lifted.n_edges == 3 * 5 + 5 * 6 + 6 * 4
        assert lm.n_parameters == 69

    def test_width_one_isomorphic_to_base(self):
        b = mlp_blueprint()
        lm = fully_connected_lift(b, (1, 1, 1, 1))
        assert lm.lifted == b.base

    def test_two_vertex_2x3_has_six_edges(self):
        lm = fully_connected_lift(single_edge_blueprint(), (2, 3))
        assert lm.lifted.n_edges == 6

    def test_named_inputs(self):
        lm = fully_connected_lift(mlp_blueprint(), (3, 1, 1, 1), input_names={0: ["r", "g", "b"]})
        assert lm.input_names == ("r", "g", "b")

    def test_zero_width_rejected(self):
        with pytest.raises(ValueError, match="at least 1"):
            fully_connected_lift(single_edge_blueprint(), (0, 2))


class TestForward:
    def test_missing_input(self):
        b = single_edge_blueprint()
        lm = lift_module(b, b.base, identity_map(b.base), {0: "x"})
        w = Section.zeros(lm.weight_bundle)
        with pytest.raises(MissingInput):
            forward(lm, w, {})

    def test_input_shape_checked(self):
        b = single_edge_blueprint()
        lm = lift_module(b, b.base, identity_map(b.base), {0: "x"})
        with pytest.raises(ShapeMismatch, match="input 'x'"):
            forward(lm, Section.zeros(lm.weight_bundle), {"x": np.zeros(2)})

    def test_weight_bundle_checked(self):
        lm = fully_connected_lift(single_edge_blueprint(), (2, 2))
        with pytest.raises(ShapeMismatch):
            forward(lm, Section(Bundle((1,) * 3), [np.zeros(1)] * 3), {})

    def test_dense_mlp_matches_matrix_oracle(self):
        rng = np.random.default_rng(5)
        widths = (3, 5, 6, 4)
        lm = fully_connected_lift(mlp_blueprint(), widths, input_names={0: ["r", "g", "b"]})
        w1 = rng.normal(size=(3, 5))
        w2 = rng.normal(size=(5, 6))
        w3 = rng.normal(size=(6, 4))
        # canonical edge order concatenates the blocks row-major
        w = Section.from_flat(
            lm.weight_bundle, np.concatenate([w1.ravel(), w2.ravel(), w3.ravel()])
        )
        x = rng.normal(size=3)
        acts = forward(lm, w, {"r": x[:1], "g": x[1:2], "b": x[2:]})
        f1 = np.tanh(x @ w1)
        f2 = np.tanh(f1 @ w2)
        f3 = f2 @ w3
        got = np.array([acts[14 + j][0] for j in range(4)])
        np.testing.assert_allclose(got, f3, atol=1e-12, rtol=0)
        hidden = np.array([acts[3 + j][0] for j in range(5)])
        np.testing.assert_allclose(hidden, f1, atol=1e-12, rtol=0)

    def test_bias_vertex_contributes_constant(self):
        b = sine_blueprint()
        lm = fully_connected_lift(b, (1, 1, 3, 1, 1), input_names={0: ["x"]})
        rng = np.random.default_rng(0)
        flat = rng.normal(size=lm.weight_bundle.total_dim)
        w = Section.from_flat(lm.weight_bundle, flat)
        xval = 0.37
        acts = forward(lm, w, {"x": [xval]})
        # vertices: 0 input, 1 bias, 2..4 hidden, 5 bias, 6 terminal
        # canonical edges: (0,h) mul, (1,h) mul, (h,6) pair, (5,6) mul
        win = np.array([w.values[lm.lifted.edge_index(0, 2 + j)][0] for j in range(3)])
        wb = np.array([w.values[lm.lifted.edge_index(1, 2 + j)][0] for j in range(3)])
        vout = np.array([w.values[lm.lifted.edge_index(2 + j, 6)][0] for j in range(3)])
        bout = w.values[lm.lifted.edge_index(5, 6)][0]
        hidden = np.sin(win * xval + wb)
        want = float(vout @ hidden) / np.sqrt(3.0) + bout
        assert acts[6][0] == pytest.approx(want, abs=1e-12)

    def test_empty_parent_class_gives_zero_sum(self):
        b = sine_blueprint()
        # two hidden copies; copy 3 is wired to nothing and must compute sin(0)
        g = Graph(6, [(0, 2), (1, 2), (2, 5), (3, 5), (4, 5)])
        pi = VertexMap(g, b.base, (0, 1, 2, 2, 3, 4))
        lm = lift_module(b, g, pi, {0: "x"})
        w = Section(lm.weight_bundle, [np.array([v]) for v in (1.5, 0.25, 2.0, 3.0, 0.5)])
        acts = forward(lm, w, {"x": [1.0]})
        assert acts[3][0] == 0.0
        h2 = np.sin(1.5 * 1.0 + 0.25)
        want = (2.0 * h2 + 3.0 * 0.0) / np.sqrt(2.0) + 0.5
        assert acts[5][0] == pytest.approx(want, abs=1e-12)

    def test_determinism_bitwise(self):
        lm = fully_connected_lift(mlp_blueprint(), (3, 5, 6, 4))
        rng = np.random.default_rng(1)
        w = Section.from_flat(lm.weight_bundle, rng.normal(size=lm.weight_bundle.total_dim))
        x = {n: rng.normal(size=1) for n in lm.input_names}
        a1 = forward(lm, w, x)
        a2 = forward(lm, w, x)
        assert all((u == v).all() for u, v in zip(a1.values, a2.values))

    def test_mixer_matches_attention_oracle(self):
        plan = load_blueprint_file(bundled_blueprint_path("mixer"))
        widths = plan.resolve_widths()
        lm = fully_connected_lift(
            plan.blueprint, widths,
            input_names={0: [n for n, _ in plan.input_names(widths)]},
        )
        rng = np.random.default_rng(9)
        w = Section.from_flat(lm.weight_bundle, rng.normal(size=lm.weight_bundle.total_dim))
        xs = rng.normal(size=(3, 4))
        acts = forward(lm, w, {f"tok:{i}": xs[i] for i in range(3)})

        # vertex offsets for widths (3, 4, 2, 5, 2)
        off = {0: 0, 1: 3, 2: 7, 3: 9, 4: 14}
        X = xs.T  # columns are tokens

        def edge(u, v):
            return w.values[lm.lifted.edge_index(u, v)]

        A_mat = np.array([[edge(off[0] + i, off[1] + j)[0] for j in range(4)] for i in range(3)])
        B_mat = np.array([[edge(off[0] + i, off[1] + j)[1] for j in range(4)] for i in range(3)])
        U = np.array([[edge(off[0] + i, off[2] + c)[0] for c in range(2)] for i in range(3)])
        T = np.array([[edge(off[0] + i, off[2] + c)[1] for c in range(2)] for i in range(3)])
        H0 = np.array([[edge(off[1] + j, off[3] + h)[0] for h in range(5)] for j in range(4)])
        M = np.array([[edge(off[1] + j, off[4] + s)[0] for s in range(2)] for j in range(4)])
        G = np.array([[edge(off[3] + h, off[4] + s)[0] for s in range(2)] for h in range(5)])

        logits = (X @ U) @ (X @ T).T
        e = np.exp(logits - logits.max(axis=1, keepdims=True))
        S = e / e.sum(axis=1, keepdims=True)
        Z = X @ A_mat + S @ (X @ B_mat)
        Y = Z @ M + np.maximum(Z @ H0, 0.0) @ G

        got = np.stack([acts[off[4] + s] for s in range(2)], axis=1)
        np.testing.assert_allclose(got, Y, atol=1e-10, rtol=0)


class TestReadout:
    def _flat_module(self, n_term=4):
        b = Blueprint(
            base=Graph(2, [(0, 1)]),
            initial=frozenset({0}),
            terminal=frozenset({1}),
            y_dims=Bundle((1, 1)),
            z_dims=Bundle((1,)),
            w_dims=Bundle((1,)),
            m_ops=(OpRef.of("mul"),),
            sigma_ops={1: OpRef.of("sum_identity")},
        )
        return fully_connected_lift(b, (1, n_term))

    def test_four_unit_class(self):
        lm = self._flat_module(4)
        acts = Section(lm.activation_bundle, [np.ones(1)] * 5)
        a = ReadoutCoeffs(1, lm.terminal_vertices, tuple(np.ones((1, 1)) for _ in range(4)))
        out = linear_readout(a, acts, lm)
        assert out.shape == (1,)
        assert out[0] == pytest.approx(2.0)  # 4 / sqrt(4)

    def test_zero_coeffs(self):
        lm = self._flat_module(4)
        acts = Section(lm.activation_bundle, [np.ones(1)] * 5)
        assert linear_readout(ReadoutCoeffs.zeros(lm, 3), acts, lm).tolist() == [0.0, 0.0, 0.0]

    def test_linearity(self):
        lm = fully_connected_lift(mlp_blueprint(), (3, 5, 6, 4))
        rng = np.random.default_rng(2)
        acts = Section(
            lm.activation_bundle, [rng.normal(size=d) for d in lm.activation_bundle.dims]
        )
        def coeffs():
            return ReadoutCoeffs(
                2, lm.terminal_vertices,
                tuple(rng.normal(size=(2, 1)) for _ in lm.terminal_vertices),
            )
        a, b = coeffs(), coeffs()
        mix = ReadoutCoeffs(
            2, lm.terminal_vertices,
            tuple(0.3 * ra + 1.7 * rb for ra, rb in zip(a.rows, b.rows)),
        )
        lhs = linear_readout(mix, acts, lm)
        rhs = 0.3 * linear_readout(a, acts, lm) + 1.7 * linear_readout(b, acts, lm)
        np.testing.assert_allclose(lhs, rhs, atol=1e-12, rtol=0)

    def test_against_naive_double_loop(self):
        plan = load_blueprint_file(bundled_blueprint_path("mixer"))
        widths = plan.resolve_widths()
        lm = fully_connected_lift(
            plan.blueprint, widths,
            input_names={0: [n for n, _ in plan.input_names(widths)]},
        )
        rng = np.random.default_rng(3)
        acts = Section(
            lm.activation_bundle, [rng.normal(size=d) for d in lm.activation_bundle.dims]
        )
        k = 3
        a = ReadoutCoeffs(
            k, lm.terminal_vertices,
            tuple(rng.normal(size=(k, lm.activation_bundle.dims[v])) for v in lm.terminal_vertices),
        )
        got = linear_readout(a, acts, lm)
        want = np.zeros(k)
        for i in range(k):
            for b in sorted(lm.blueprint.terminal):
                copies = [v for v in range(lm.lifted.n_vertices) if lm.projection(v) == b]
                for pos, v in enumerate(lm.terminal_vertices):
                    if v in copies:
                        want[i] += (len(copies) ** -0.5) * float(a.rows[pos][i] @ acts[v])
        np.testing.assert_allclose(got, want, atol=1e-12, rtol=0)

    def test_coeff_shape_errors(self):
        lm = self._flat_module(2)
        with pytest.raises(ShapeMismatch):
            ReadoutCoeffs(1, lm.terminal_vertices, (np.ones((2, 1)), np.ones((1, 1))))
        bad_vertices = ReadoutCoeffs(1, (0, 1), (np.ones((1, 1)), np.ones((1, 1))))
        acts = Section(lm.activation_bundle, [np.ones(1)] * 3)
        with pytest.raises(ShapeMismatch):
            linear_readout(bad_vertices, acts, lm)

    def test_flat_round_trip(self):
        lm = self._flat_module(3)
        rng = np.random.default_rng(4)
        a = ReadoutCoeffs(
            2, lm.terminal_vertices, tuple(rng.normal(size=(2, 1)) for _ in range(3))
        )
        again = a.from_flat(a.to_flat())
        assert all((x == y).all() for x, y in zip(a.rows, again.rows))


def blowup_module(lm, copies_of, rng):
    """A random fibration onto ``lm.lifted`` and the lifted module over it.

    Every vertex v of the source gets ``copies_of(v)`` copies; each copy
    picks one parent copy per parent of v, so the projection restricts to
    bijections on in-neighborhoods. Input vertices keep one copy so the
    composite naming stays injective.
    """
    g = lm.lifted
    named = dict(lm.naming)
    counts = [1 if v in named else copies_of(v) for v in range(g.n_vertices)]
    offsets = np.concatenate(([0], np.cumsum(counts)))
    assignment = []
    for v, c in enumerate(counts):
        assignment.extend([v] * c)
    edges = []
    for v in range(g.n_vertices):
        for k in range(counts[v]):
            child = int(offsets[v]) + k
            for p in g.parents(v):
                pick = int(rng.integers(counts[p]))
                edges.append((int(offsets[p]) + pick, child))
    phi = VertexMap(Graph(int(offsets[-1]), edges), g, tuple(assignment))
    naming = {int(offsets[v]): name for v, name in lm.naming}
    top = lift_module(
        lm.blueprint, phi.source, compose_maps(phi, lm.projection), naming
    )
    return top, phi


class TestMorphismCommutation:
    @pytest.mark.parametrize("name,widths", [
        ("mlp3", (3, 5, 6, 4)),
        ("sine", (1, 1, 4, 1, 2)),
        ("mixer", None),
    ])
    def test_activations_commute(self, name, widths):
        plan = load_blueprint_file(bundled_blueprint_path(name))
        widths = plan.resolve_widths({"h": 4}) if widths is None else widths
        lm = fully_connected_lift(
            plan.blueprint, widths,
            input_names={
                v: [n for n, bv in plan.input_names(widths) if bv == v]
                for v in sorted(plan.blueprint.initial)
            },
        )
        rng = np.random.default_rng(17)
        top, phi = blowup_module(lm, lambda v: int(rng.integers(1, 4)), rng)
        w_h = Section.from_flat(lm.weight_bundle, rng.normal(size=lm.weight_bundle.total_dim))
        w_g = pullback_edge_section(phi, w_h)
        x = {n: rng.normal(size=top.activation_bundle.dims[v]) for v, n in top.naming}
        acts_h = forward(lm, w_h, x)
        acts_g = forward(top, w_g, x)
        for v in range(top.lifted.n_vertices):
            np.testing.assert_allclose(
                acts_g[v], acts_h[phi(v)], atol=1e-12, rtol=0,
                err_msg=f"{name}: vertex {v} over {phi(v)}",
            )


class TestEdgePullback:
    def test_functoriality(self):
        b = single_edge_blueprint()
        lm = fully_connected_lift(b, (2, 2))
        rng = np.random.default_rng(8)
        mid, phi1 = blowup_module(lm, lambda v: 2, rng)
        top, phi2 = blowup_module(mid, lambda v: 2, rng)
        s = Section.from_flat(lm.weight_bundle, rng.normal(size=lm.weight_bundle.total_dim))
        one = pullback_edge_section(compose_maps(phi2, phi1), s)
        two = pullback_edge_section(phi2, pullback_edge_section(phi1, s))
        assert one.bundle == two.bundle
        for u, v in zip(one.values, two.values):
            np.testing.assert_array_equal(u, v)
