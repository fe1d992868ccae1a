"""Primitive registry: the edge maps and vertex activations modules are built from.

Every primitive maps a tuple of flat float64 arrays to one flat float64 array
and carries exact reverse (vjp) and forward (jvp) derivative rules. Edge
primitives ("edge" kind) take ``(w, y)``: the edge weight and the parent
activation. Vertex primitives ("vertex" kind) take one summed pre-activation
per base parent, in ascending base-parent id order.

Invocation counts of eval/vjp/jvp are tracked globally so tests can assert
that a backward sweep stays within a constant factor of forward cost.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Callable, Mapping

import numpy as np
from scipy.signal import convolve2d, correlate2d

__all__ = [
    "Primitive",
    "UnknownPrimitive",
    "SignatureError",
    "registry_lookup",
    "registered_names",
    "reset_invocation_counts",
    "invocation_counts",
]


class UnknownPrimitive(KeyError):
    """Requested a primitive name that is not registered."""


class SignatureError(ValueError):
    """Argument dimensions incompatible with the primitive."""


_COUNTS = {"eval": 0, "vjp": 0, "jvp": 0}


def reset_invocation_counts() -> None:
    for k in _COUNTS:
        _COUNTS[k] = 0


def invocation_counts() -> dict[str, int]:
    return dict(_COUNTS)


@dataclass(frozen=True)
class _Spec:
    kind: str
    out_dim: Callable[[Mapping[str, Any], tuple[int, ...]], int]
    ev: Callable
    vj: Callable
    jv: Callable
    smooth: bool = True  # continuously differentiable everywhere


@dataclass(frozen=True)
class Primitive:
    """A named operation with bound static params and derivative rules."""

    name: str
    kind: str
    params: Mapping[str, Any] = field(default_factory=dict)
    _spec: _Spec = field(repr=False, default=None)

    @property
    def smooth(self) -> bool:
        return self._spec.smooth

    def out_dim(self, arg_dims: tuple[int, ...]) -> int:
        """Output dimension for the given argument dimensions.

        Raises:
            SignatureError: if the dimensions are incompatible.
        """
        return self._spec.out_dim(self.params, tuple(int(d) for d in arg_dims))

    def eval(self, *args: np.ndarray) -> np.ndarray:
        _COUNTS["eval"] += 1
        return self._spec.ev(self.params, *args)

    def vjp(self, args: tuple[np.ndarray, ...], ct: np.ndarray) -> tuple[np.ndarray, ...]:
        """Cotangent pullback: gradients of <ct, eval(args)> per argument."""
        _COUNTS["vjp"] += 1
        return self._spec.vj(self.params, args, ct)

    def jvp(self, args: tuple[np.ndarray, ...], tangents: tuple[np.ndarray, ...]) -> np.ndarray:
        """Tangent pushforward along the primitive at ``args``."""
        _COUNTS["jvp"] += 1
        return self._spec.jv(self.params, args, tangents)


_REGISTRY: dict[str, _Spec] = {}


def _register(name: str, spec: _Spec) -> None:
    _REGISTRY[name] = spec


def registry_lookup(name: str, params: Mapping[str, Any] | None = None) -> Primitive:
    """Fetch a primitive by name with its static params bound.

    Raises:
        UnknownPrimitive: if the name is not registered.
    """
    if name not in _REGISTRY:
        raise UnknownPrimitive(name)
    return Primitive(name=name, kind=_REGISTRY[name].kind, params=dict(params or {}), _spec=_REGISTRY[name])


def registered_names() -> list[str]:
    return sorted(_REGISTRY)


def _expect(cond: bool, msg: str) -> None:
    if not cond:
        raise SignatureError(msg)


# ---------------------------------------------------------------- edge maps


def _mul_dim(p, dims):
    _expect(dims == (1, 1), f"mul wants scalar weight and input, got dims {dims}")
    return 1


_register(
    "mul",
    _Spec(
        kind="edge",
        out_dim=_mul_dim,
        ev=lambda p, w, y: w * y,
        vj=lambda p, args, ct: (ct * args[1], ct * args[0]),
        jv=lambda p, args, tg: tg[0] * args[1] + args[0] * tg[1],
    ),
)


def _pair_dim(p, dims):
    _expect(dims == (1, 1), f"pair wants scalar weight and input, got dims {dims}")
    return 2


_register(
    "pair",
    _Spec(
        kind="edge",
        out_dim=_pair_dim,
        ev=lambda p, w, y: np.array([w[0] * y[0], 1.0]),
        vj=lambda p, args, ct: (ct[:1] * args[1], ct[:1] * args[0]),
        jv=lambda p, args, tg: np.array([tg[0][0] * args[1][0] + args[0][0] * tg[1][0], 0.0]),
    ),
)


def _tensor_dim(p, dims):
    w, y = dims
    _expect(w >= 1 and y >= 1, f"tensor wants nonempty factors, got dims {dims}")
    return w * y


def _tensor_vjp(p, args, ct):
    w, y = args
    z = ct.reshape(w.shape[0], y.shape[0])
    return (z @ y, z.T @ w)


_register(
    "tensor",
    _Spec(
        kind="edge",
        out_dim=_tensor_dim,
        ev=lambda p, w, y: np.outer(w, y).ravel(),
        vj=_tensor_vjp,
        jv=lambda p, args, tg: (np.outer(tg[0], args[1]) + np.outer(args[0], tg[1])).ravel(),
    ),
)


def _matvec_dim(p, dims):
    rows, cols = int(p["rows"]), int(p["cols"])
    _expect(dims == (rows * cols, rows), f"matvec({rows}x{cols}) got dims {dims}")
    return cols


def _matvec_vjp(p, args, ct):
    rows, cols = int(p["rows"]), int(p["cols"])
    w, y = args
    return (np.outer(y, ct).ravel(), w.reshape(rows, cols) @ ct)


_register(
    "matvec",
    _Spec(
        kind="edge",
        out_dim=_matvec_dim,
        ev=lambda p, w, y: y @ w.reshape(int(p["rows"]), int(p["cols"])),
        vj=_matvec_vjp,
        jv=lambda p, args, tg: tg[1] @ args[0].reshape(int(p["rows"]), int(p["cols"]))
        + args[1] @ tg[0].reshape(int(p["rows"]), int(p["cols"])),
    ),
)


def _identity_dim(p, dims):
    _expect(dims[0] == 0, f"identity edge carries no weight, got w_dim {dims[0]}")
    return dims[1]


_register(
    "identity",
    _Spec(
        kind="edge",
        out_dim=_identity_dim,
        ev=lambda p, w, y: y.copy(),
        vj=lambda p, args, ct: (np.zeros(0), ct.copy()),
        jv=lambda p, args, tg: tg[1].copy(),
    ),
)


def _conv_shapes(p):
    h, w = (int(s) for s in p["in_shape"])
    kh, kw = (int(s) for s in p["kernel"])
    _expect(kh >= 1 and kw >= 1 and kh <= h and kw <= w, "kernel larger than input")
    return (h, w), (kh, kw), (h - kh + 1, w - kw + 1)


def _conv_dim(p, dims):
    (h, w), (kh, kw), (oh, ow) = _conv_shapes(p)
    _expect(dims == (kh * kw, h * w), f"conv2d_nopad expected dims {(kh * kw, h * w)}, got {dims}")
    return oh * ow


def _conv_eval(p, k, y):
    (h, w), (kh, kw), _ = _conv_shapes(p)
    return correlate2d(y.reshape(h, w), k.reshape(kh, kw), mode="valid").ravel()


def _conv_vjp(p, args, ct):
    (h, w), (kh, kw), (oh, ow) = _conv_shapes(p)
    k, y = args[0].reshape(kh, kw), args[1].reshape(h, w)
    g = ct.reshape(oh, ow)
    return (
        correlate2d(y, g, mode="valid").ravel(),
        convolve2d(g, k, mode="full").ravel(),
    )


def _conv_jvp(p, args, tg):
    (h, w), (kh, kw), _ = _conv_shapes(p)
    k, y = args[0].reshape(kh, kw), args[1].reshape(h, w)
    tk, ty = tg[0].reshape(kh, kw), tg[1].reshape(h, w)
    return (correlate2d(ty, k, mode="valid") + correlate2d(y, tk, mode="valid")).ravel()


_register(
    "conv2d_nopad",
    _Spec(kind="edge", out_dim=_conv_dim, ev=_conv_eval, vj=_conv_vjp, jv=_conv_jvp),
)


# -------------------------------------------------------- vertex activations


def _const_one_dim(p, dims):
    _expect(dims == (), f"const_one takes no inputs, got dims {dims}")
    return 1


_register(
    "const_one",
    _Spec(
        kind="vertex",
        out_dim=_const_one_dim,
        ev=lambda p: np.array([1.0]),
        vj=lambda p, args, ct: (),
        jv=lambda p, args, tg: np.zeros(1),
    ),
)


def _sum_act_dim(name):
    def dim(p, dims):
        _expect(len(dims) >= 1, f"{name} needs at least one input class")
        _expect(len(set(dims)) == 1, f"{name} input classes must share one dimension, got {dims}")
        return dims[0]

    return dim


def _sum_act(act, dact, name, smooth=True):
    def ev(p, *args):
        s = args[0].copy()
        for a in args[1:]:
            s += a
        return act(s)

    def vj(p, args, ct):
        s = args[0].copy()
        for a in args[1:]:
            s += a
        g = ct * dact(s)
        return tuple(g.copy() for _ in args)

    def jv(p, args, tg):
        s = args[0].copy()
        t = tg[0].copy()
        for a in args[1:]:
            s += a
        for u in tg[1:]:
            t += u
        return dact(s) * t

    return _Spec(kind="vertex", out_dim=_sum_act_dim(name), ev=ev, vj=vj, jv=jv, smooth=smooth)


_register("sum_identity", _sum_act(lambda s: s.copy(), lambda s: np.ones_like(s), "sum_identity"))
_register("sum_tanh", _sum_act(np.tanh, lambda s: 1.0 - np.tanh(s) ** 2, "sum_tanh"))
_register("sum_sin", _sum_act(np.sin, np.cos, "sum_sin"))
# subgradient at the kink is 0
_register(
    "sum_relu",
    _sum_act(
        lambda s: np.maximum(s, 0.0),
        lambda s: (s > 0.0).astype(np.float64),
        "sum_relu",
        smooth=False,
    ),
)


def _scaled_bias_dim(p, dims):
    _expect(
        sorted(dims) == [1, 2],
        f"scaled_bias wants one (value,count) pair class and one scalar bias class, got {dims}",
    )
    return 1


def _scaled_bias_split(args):
    if args[0].shape[0] == 2:
        return 0, 1
    return 1, 0


def _scaled_bias_eval(p, *args):
    i, j = _scaled_bias_split(args)
    x, n = args[i]
    b = args[j][0]
    if n <= 0.0:
        return np.array([b])
    return np.array([x / math.sqrt(n) + b])


def _scaled_bias_vjp(p, args, ct):
    i, j = _scaled_bias_split(args)
    x, n = args[i]
    c = ct[0]
    out = [None, None]
    if n <= 0.0:
        out[i] = np.zeros(2)
    else:
        out[i] = np.array([c / math.sqrt(n), -0.5 * c * x * n ** (-1.5)])
    out[j] = np.array([c])
    return tuple(out)


def _scaled_bias_jvp(p, args, tg):
    i, j = _scaled_bias_split(args)
    x, n = args[i]
    tx, tn = tg[i]
    tb = tg[j][0]
    if n <= 0.0:
        return np.array([tb])
    return np.array([tx / math.sqrt(n) - 0.5 * x * n ** (-1.5) * tn + tb])


_register(
    "scaled_bias",
    _Spec(
        kind="vertex",
        out_dim=_scaled_bias_dim,
        ev=_scaled_bias_eval,
        vj=_scaled_bias_vjp,
        jv=_scaled_bias_jvp,
        smooth=False,  # kink at count 0, never hit once any parent is wired
    ),
)


def _outer_product_dim(p, dims):
    n = int(p["n"])
    _expect(dims == (2 * n,), f"outer_product(n={n}) wants one class of dim {2 * n}, got {dims}")
    return n * n


def _outer_product_vjp(p, args, ct):
    n = int(p["n"])
    q, k = args[0][:n], args[0][n:]
    c = ct.reshape(n, n)
    return (np.concatenate([c @ k, c.T @ q]),)


def _outer_product_jvp(p, args, tg):
    n = int(p["n"])
    q, k = args[0][:n], args[0][n:]
    tq, tk = tg[0][:n], tg[0][n:]
    return (np.outer(tq, k) + np.outer(q, tk)).ravel()


_register(
    "outer_product",
    _Spec(
        kind="vertex",
        out_dim=_outer_product_dim,
        ev=lambda p, a: np.outer(a[: int(p["n"])], a[int(p["n"]) :]).ravel(),
        vj=_outer_product_vjp,
        jv=_outer_product_jvp,
    ),
)


def _softmax_rows(a: np.ndarray) -> np.ndarray:
    z = a - a.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _add_soft_mul_dim(p, dims):
    n = int(p["n"])
    _expect(
        dims == (2 * n, n * n),
        f"add_soft_mul(n={n}) wants classes of dims {(2 * n, n * n)} in order, got {dims}",
    )
    return n


def _add_soft_mul_eval(p, xy, a):
    n = int(p["n"])
    x, y = xy[:n], xy[n:]
    s = _softmax_rows(a.reshape(n, n))
    return x + s @ y


def _add_soft_mul_vjp(p, args, ct):
    n = int(p["n"])
    xy, a = args
    y = xy[n:]
    s = _softmax_rows(a.reshape(n, n))
    ct_x = ct.copy()
    ct_y = s.T @ ct
    # row i of softmax: d(s_i . y)/da_ij = s_ij (y_j - s_i . y)
    sy = s @ y
    ct_a = (ct[:, None] * s * (y[None, :] - sy[:, None])).ravel()
    return (np.concatenate([ct_x, ct_y]), ct_a)


def _add_soft_mul_jvp(p, args, tg):
    n = int(p["n"])
    xy, a = args
    txy, ta = tg
    y = xy[n:]
    tx, ty = txy[:n], txy[n:]
    s = _softmax_rows(a.reshape(n, n))
    tam = ta.reshape(n, n)
    ts = s * (tam - (s * tam).sum(axis=1, keepdims=True))
    return tx + ts @ y + s @ ty


_register(
    "add_soft_mul",
    _Spec(kind="vertex", out_dim=_add_soft_mul_dim, ev=_add_soft_mul_eval, vj=_add_soft_mul_vjp, jv=_add_soft_mul_jvp),
)


def _max_reduce_dim(p, dims):
    _expect(len(dims) == 1 and dims[0] >= 1, f"max_reduce wants one nonempty class, got {dims}")
    return 1


def _max_reduce_pre(p):
    pre = p.get("pre", "identity")
    _expect(pre in ("identity", "relu"), f"unknown max_reduce pre-activation {pre!r}")
    return pre


def _max_reduce_eval(p, s):
    v = np.maximum(s, 0.0) if _max_reduce_pre(p) == "relu" else s
    return np.array([v.max()])


def _max_reduce_grad_entry(p, s):
    """(index, local derivative) of the winning entry; first index on ties."""
    pre = _max_reduce_pre(p)
    v = np.maximum(s, 0.0) if pre == "relu" else s
    i = int(np.argmax(v))
    d = 1.0
    if pre == "relu" and s[i] <= 0.0:
        d = 0.0
    return i, d


def _max_reduce_vjp(p, args, ct):
    i, d = _max_reduce_grad_entry(p, args[0])
    g = np.zeros_like(args[0])
    g[i] = ct[0] * d
    return (g,)


def _max_reduce_jvp(p, args, tg):
    i, d = _max_reduce_grad_entry(p, args[0])
    return np.array([d * tg[0][i]])


_register(
    "max_reduce",
    _Spec(kind="vertex", out_dim=_max_reduce_dim, ev=_max_reduce_eval, vj=_max_reduce_vjp, jv=_max_reduce_jvp, smooth=False),
)
