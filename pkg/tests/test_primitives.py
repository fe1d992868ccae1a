"""Primitive registry: evaluation rules, derivative exactness, adjoint identity."""

import math

import numpy as np
import pytest

from liftlab.primitives import (
    SignatureError,
    UnknownPrimitive,
    invocation_counts,
    registered_names,
    registry_lookup,
    reset_invocation_counts,
)

# (name, params, arg_dims, kink_margin_setup)
INSTANCES = [
    ("mul", {}, (1, 1)),
    ("pair", {}, (1, 1)),
    ("tensor", {}, (3, 4)),
    ("tensor", {}, (1, 5)),
    ("matvec", {"rows": 3, "cols": 2}, (6, 3)),
    ("identity", {}, (0, 4)),
    ("conv2d_nopad", {"in_shape": (6, 5), "kernel": (3, 2)}, (6, 30)),
    ("const_one", {}, ()),
    ("sum_identity", {}, (3, 3)),
    ("sum_tanh", {}, (4,)),
    ("sum_sin", {}, (2, 2, 2)),
    ("sum_relu", {}, (3, 3)),
    ("scaled_bias", {}, (2, 1)),
    ("scaled_bias", {}, (1, 2)),
    ("outer_product", {"n": 3}, (6,)),
    ("add_soft_mul", {"n": 2}, (4, 4)),
    ("add_soft_mul", {"n": 3}, (6, 9)),
    ("max_reduce", {}, (5,)),
    ("max_reduce", {"pre": "relu"}, (5,)),
]


def _draw_args(name, params, arg_dims, rng):
    """Random args of magnitude <= 10, pushed away from non-smooth points."""
    args = tuple(rng.uniform(-2.0, 2.0, size=d) for d in arg_dims)
    if name == "sum_relu":
        s = sum(args)
        shift = np.where(np.abs(s) < 0.05, 0.1 - s / len(args), 0.0)
        args = tuple(a + shift for a in args)
    if name == "scaled_bias":
        pair = 0 if arg_dims[0] == 2 else 1
        args[pair][1] = rng.uniform(1.0, 9.0)  # a positive wired-parent count
    if name == "max_reduce":
        v = args[0]
        i = int(rng.integers(v.shape[0]))
        v[i] = v.max() + 0.5  # unique argmax with a wide margin
    return args


class TestRegistry:
    def test_unknown_name(self):
        with pytest.raises(UnknownPrimitive):
            registry_lookup("nope")

    def test_all_expected_builtins_present(self):
        names = set(registered_names())
        assert {
            "mul",
            "pair",
            "tensor",
            "matvec",
            "identity",
            "conv2d_nopad",
            "const_one",
            "sum_identity",
            "sum_tanh",
            "sum_sin",
            "sum_relu",
            "scaled_bias",
            "outer_product",
            "add_soft_mul",
            "max_reduce",
        } <= names

    def test_invocation_counting(self):
        reset_invocation_counts()
        p = registry_lookup("mul")
        p.eval(np.ones(1), np.ones(1))
        p.vjp((np.ones(1), np.ones(1)), np.ones(1))
        p.jvp((np.ones(1), np.ones(1)), (np.ones(1), np.ones(1)))
        assert invocation_counts() == {"eval": 1, "vjp": 1, "jvp": 1}


class TestEvalExamples:
    def test_mul(self):
        p = registry_lookup("mul")
        assert p.eval(np.array([2.0]), np.array([3.0]))[0] == 6.0

    def test_pair_appends_one(self):
        p = registry_lookup("pair")
        np.testing.assert_array_equal(p.eval(np.array([2.0]), np.array([3.0])), [6.0, 1.0])

    def test_tensor_stacks_scaled_copies(self):
        p = registry_lookup("tensor")
        z = p.eval(np.array([2.0, -1.0]), np.array([1.0, 3.0]))
        np.testing.assert_array_equal(z, [2.0, 6.0, -1.0, -3.0])

    def test_matvec_row_vector_convention(self):
        p = registry_lookup("matvec", {"rows": 2, "cols": 3})
        w = np.arange(6.0)  # [[0,1,2],[3,4,5]]
        y = np.array([1.0, 10.0])
        np.testing.assert_array_equal(p.eval(w, y), [30.0, 41.0, 52.0])

    def test_identity_passes_through(self):
        p = registry_lookup("identity")
        y = np.array([1.0, 2.0])
        np.testing.assert_array_equal(p.eval(np.zeros(0), y), y)

    def test_const_one(self):
        np.testing.assert_array_equal(registry_lookup("const_one").eval(), [1.0])

    def test_sum_acts_sum_classes_first(self):
        p = registry_lookup("sum_tanh")
        a, b = np.array([0.3]), np.array([0.4])
        assert p.eval(a, b)[0] == pytest.approx(math.tanh(0.7))

    def test_relu_at_zero_is_zero(self):
        p = registry_lookup("sum_relu")
        assert p.eval(np.array([0.0]))[0] == 0.0
        (g,) = p.vjp((np.array([0.0]),), np.array([1.0]))
        assert g[0] == 0.0  # subgradient at the kink

    def test_scaled_bias_both_argument_orders(self):
        p = registry_lookup("scaled_bias")
        pair, bias = np.array([6.0, 4.0]), np.array([0.25])
        assert p.eval(pair, bias)[0] == pytest.approx(6.0 / 2.0 + 0.25)
        assert p.eval(bias, pair)[0] == pytest.approx(6.0 / 2.0 + 0.25)

    def test_scaled_bias_empty_count_falls_back_to_bias(self):
        p = registry_lookup("scaled_bias")
        assert p.eval(np.zeros(2), np.array([0.7]))[0] == 0.7

    def test_outer_product(self):
        p = registry_lookup("outer_product", {"n": 2})
        z = p.eval(np.array([1.0, 2.0, 3.0, 4.0]))  # q=(1,2), k=(3,4)
        np.testing.assert_array_equal(z, [3.0, 4.0, 6.0, 8.0])

    def test_add_soft_mul_uniform_at_zero_logits(self):
        p = registry_lookup("add_soft_mul", {"n": 2})
        xy = np.array([1.0, -1.0, 2.0, 6.0])  # x=(1,-1), y=(2,6)
        out = p.eval(xy, np.zeros(4))
        np.testing.assert_allclose(out, [1.0 + 4.0, -1.0 + 4.0])

    def test_add_soft_mul_softmax_is_shift_invariant(self):
        p = registry_lookup("add_soft_mul", {"n": 2})
        xy = np.array([0.0, 0.0, 1.0, 2.0])
        a = np.array([3.0, 1.0, -2.0, 0.5])
        np.testing.assert_allclose(p.eval(xy, a), p.eval(xy, a + 700.0), rtol=1e-12)

    def test_conv_shape_example(self):
        p = registry_lookup("conv2d_nopad", {"in_shape": (16, 16), "kernel": (5, 5)})
        assert p.out_dim((25, 256)) == 144
        z = p.eval(np.ones(25), np.ones(256))
        assert z.shape == (144,)
        np.testing.assert_allclose(z, 25.0)

    def test_conv_matches_direct_loop(self):
        rng = np.random.default_rng(3)
        h, w, kh, kw = 5, 6, 2, 3
        p = registry_lookup("conv2d_nopad", {"in_shape": (h, w), "kernel": (kh, kw)})
        x = rng.normal(size=(h, w))
        k = rng.normal(size=(kh, kw))
        got = p.eval(k.ravel(), x.ravel()).reshape(h - kh + 1, w - kw + 1)
        want = np.zeros_like(got)
        for i in range(h - kh + 1):
            for j in range(w - kw + 1):
                want[i, j] = (x[i : i + kh, j : j + kw] * k).sum()
        np.testing.assert_allclose(got, want, atol=1e-12)

    def test_max_reduce_first_argmax_on_ties(self):
        p = registry_lookup("max_reduce")
        (g,) = p.vjp((np.array([1.0, 3.0, 3.0]),), np.array([2.0]))
        np.testing.assert_array_equal(g, [0.0, 2.0, 0.0])

    def test_max_reduce_relu_clamps(self):
        p = registry_lookup("max_reduce", {"pre": "relu"})
        assert p.eval(np.array([-5.0, -1.0]))[0] == 0.0


class TestSignatures:
    def test_out_dims(self):
        assert registry_lookup("tensor").out_dim((2, 3)) == 6
        assert registry_lookup("identity").out_dim((0, 7)) == 7
        assert registry_lookup("add_soft_mul", {"n": 3}).out_dim((6, 9)) == 3
        assert registry_lookup("outer_product", {"n": 4}).out_dim((8,)) == 16

    def test_rejections(self):
        with pytest.raises(SignatureError):
            registry_lookup("mul").out_dim((2, 1))
        with pytest.raises(SignatureError):
            registry_lookup("identity").out_dim((1, 1))
        with pytest.raises(SignatureError):
            registry_lookup("sum_tanh").out_dim((2, 3))
        with pytest.raises(SignatureError):
            registry_lookup("sum_relu").out_dim(())
        with pytest.raises(SignatureError):
            registry_lookup("scaled_bias").out_dim((2, 2))
        with pytest.raises(SignatureError):
            registry_lookup("max_reduce", {"pre": "abs"}).eval(np.ones(3))
        with pytest.raises(SignatureError):
            registry_lookup("conv2d_nopad", {"in_shape": (3, 3), "kernel": (4, 4)}).out_dim((16, 9))


@pytest.mark.parametrize("name,params,arg_dims", INSTANCES)
class TestDerivatives:
    def test_eval_dim_matches_signature(self, name, params, arg_dims):
        p = registry_lookup(name, params)
        args = _draw_args(name, params, arg_dims, np.random.default_rng(0))
        assert p.eval(*args).shape == (p.out_dim(arg_dims),)

    def test_vjp_against_central_differences(self, name, params, arg_dims):
        p = registry_lookup(name, params)
        rng = np.random.default_rng(11)
        args = _draw_args(name, params, arg_dims, rng)
        out_dim = p.out_dim(arg_dims)
        ct = rng.uniform(-1.0, 1.0, size=out_dim)
        grads = p.vjp(args, ct)
        assert len(grads) == len(args)
        eps = 1e-5
        for ai, (arg, grad) in enumerate(zip(args, grads)):
            assert grad.shape == arg.shape
            for j in range(arg.shape[0]):
                hi = tuple(a.copy() for a in args)
                lo = tuple(a.copy() for a in args)
                hi[ai][j] += eps
                lo[ai][j] -= eps
                fd = float(ct @ (p.eval(*hi) - p.eval(*lo))) / (2 * eps)
                assert abs(grad[j] - fd) <= 1e-5 * (1.0 + abs(fd)), (
                    f"{name} arg {ai} coord {j}: analytic {grad[j]}, fd {fd}"
                )

    def test_adjoint_identity(self, name, params, arg_dims):
        p = registry_lookup(name, params)
        rng = np.random.default_rng(29)
        out_dim = p.out_dim(arg_dims)
        for _ in range(100):
            args = _draw_args(name, params, arg_dims, rng)
            ct = rng.normal(size=out_dim)
            tg = tuple(rng.normal(size=d) for d in arg_dims)
            lhs = sum(float(g @ t) for g, t in zip(p.vjp(args, ct), tg))
            rhs = float(ct @ p.jvp(args, tg))
            assert abs(lhs - rhs) <= 1e-10 * (1.0 + abs(rhs))
