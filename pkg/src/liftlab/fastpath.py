"""Vectorized batch trainer for scalar-coordinate modules.

The reference forward/backward sweeps evaluate one sample at a time through
per-vertex primitives, which is exact but far too slow for the experiment
harness. Modules whose coordinates are all scalars (every vertex and edge
dimension 1, edge maps mul or pair, vertex maps from a short whitelist)
reduce to masked matrix products per base edge, so whole batches move
through numpy at once. Compilation fails loudly on anything else; callers
fall back to the reference path.

Weight layout matches ``Section.to_flat`` on the module's weight bundle, so
compiled state interchanges exactly with the reference implementation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import sparse as sp

from .bundles import Section
from .graphs import topological_order
from .modules import LiftedModule
from .training import NonFiniteLoss, OptimizerConfig, Trajectory, _finish, _partial

__all__ = [
    "UnsupportedBlueprint",
    "FastScalarModule",
    "DenseMLP",
    "identity_readout",
    "fast_train",
]

_GRAD_CHUNK = 1 << 14


class UnsupportedBlueprint(ValueError):
    """The module falls outside the vectorizable scalar family."""


def _act_table(name: str):
    if name == "sum_identity":
        return (lambda z: z), (lambda z: np.ones_like(z))
    if name == "sum_relu":
        # subgradient 0 at the kink, matching the reference primitive
        return (lambda z: np.maximum(z, 0.0)), (lambda z: (z > 0).astype(float))
    if name == "sum_tanh":
        return np.tanh, (lambda z: 1.0 - np.tanh(z) ** 2)
    if name == "sum_sin":
        return np.sin, np.cos
    raise UnsupportedBlueprint(f"activation {name!r} not vectorized")


def _chunked_pair_sum(A: np.ndarray, C: np.ndarray, rows: np.ndarray, cols: np.ndarray, out: np.ndarray):
    """out[i] = sum_b A[b, rows[i]] * C[b, cols[i]] without a full (B, nnz) buffer."""
    for s in range(0, rows.size, _GRAD_CHUNK):
        sl = slice(s, s + _GRAD_CHUNK)
        np.einsum("bi,bi->i", A[:, rows[sl]], C[:, cols[sl]], out=out[sl])


class _Edge:
    """One base edge compiled to a masked (n_src, n_dst) linear map."""

    def __init__(self, kind: str, src: int, dst: int, n_src: int, n_dst: int,
                 rows: np.ndarray, cols: np.ndarray, flat_idx: np.ndarray):
        self.kind = kind
        self.src = src
        self.dst = dst
        self.n_src = n_src
        self.n_dst = n_dst
        self.rows = rows
        self.cols = cols
        self.flat_idx = flat_idx
        self.counts = np.bincount(cols, minlength=n_dst).astype(float)
        nnz = rows.size
        self.dense = nnz >= 0.25 * n_src * n_dst
        if self.dense:
            self._w = np.zeros((n_src, n_dst))
        else:
            order = np.arange(nnz)
            self._fwd = sp.csr_matrix((order.astype(float), (rows, cols)), shape=(n_src, n_dst))
            self._perm = self._fwd.data.astype(np.intp)
            self._bwd = sp.csr_matrix((order.astype(float), (cols, rows)), shape=(n_dst, n_src))
            self._permT = self._bwd.data.astype(np.intp)

    def load(self, w_flat: np.ndarray) -> None:
        block = w_flat[self.flat_idx]
        if self.dense:
            self._w[self.rows, self.cols] = block
        else:
            self._fwd.data = block[self._perm]
            self._bwd.data = block[self._permT]

    def apply(self, acts: np.ndarray) -> np.ndarray:
        if self.dense:
            return acts @ self._w
        # acts @ M computed as (M^T @ acts^T)^T so the csr kernel runs
        return self._bwd.dot(acts.T).T

    def apply_t(self, ct: np.ndarray) -> np.ndarray:
        if self.dense:
            return ct @ self._w.T
        return self._fwd.dot(ct.T).T

    def grad(self, acts: np.ndarray, ct: np.ndarray, out_flat: np.ndarray) -> None:
        if self.dense and self.rows.size == self.n_src * self.n_dst:
            out_flat[self.flat_idx] += (acts.T @ ct)[self.rows, self.cols]
            return
        g = np.empty(self.rows.size)
        _chunked_pair_sum(acts, ct, self.rows, self.cols, g)
        out_flat[self.flat_idx] += g


@dataclass
class _Vertex:
    base: int
    sigma: str
    width: int
    in_edges: list = field(default_factory=list)
    act: Callable | None = None
    dact: Callable | None = None


class FastScalarModule:
    """Batch evaluator/differentiator equivalent to the reference sweeps.

    Predictions are the activations of the single terminal class in
    ascending lifted-id order, i.e. the linear readout frozen at
    sqrt(m) times the identity. ``loss`` is "mse" (squared error against
    targets of matching shape) or "xent" (softmax cross-entropy against
    integer labels).
    """

    def __init__(self, lm: LiftedModule, loss: str = "mse"):
        if loss not in ("mse", "xent"):
            raise ValueError(f"unknown loss {loss!r}")
        self.lm = lm
        self.loss = loss
        bp = lm.blueprint
        base = bp.base
        if any(d != 1 for d in lm.activation_bundle.dims):
            raise UnsupportedBlueprint("all activation coordinates must be scalars")
        if any(d != 1 for d in lm.weight_bundle.dims):
            raise UnsupportedBlueprint("all weight coordinates must be scalars")
        if len(bp.initial) != 1:
            raise UnsupportedBlueprint("exactly one input vertex is supported")
        if len(bp.terminal) != 1:
            raise UnsupportedBlueprint("exactly one terminal vertex is supported")

        self.input_vertex = next(iter(bp.initial))
        self.terminal_vertex = next(iter(bp.terminal))
        pre = lm.projection.preimage
        self.class_ids = {b: np.asarray(pre(b), dtype=np.intp) for b in range(base.n_vertices)}
        local = {}
        for b, ids in self.class_ids.items():
            for j, v in enumerate(ids):
                local[int(v)] = j
        self.n_inputs = self.class_ids[self.input_vertex].size
        self.n_outputs = self.class_ids[self.terminal_vertex].size
        self.input_names = lm.input_names

        edge_pos = {e: i for i, e in enumerate(base.edges)}
        groups: dict[int, list[tuple[int, int, int]]] = {i: [] for i in range(len(base.edges))}
        for k, (u, v) in enumerate(lm.lifted.edges):
            be = edge_pos[(lm.projection(u), lm.projection(v))]
            groups[be].append((local[u], local[v], k))
        self.edges: list[_Edge] = []
        for i, (a, b) in enumerate(base.edges):
            name = bp.m_ops[i].name
            if name not in ("mul", "pair"):
                raise UnsupportedBlueprint(f"edge map {name!r} not vectorized")
            tri = np.asarray(groups[i], dtype=np.intp).reshape(-1, 3)
            self.edges.append(_Edge(
                name, a, b, self.class_ids[a].size, self.class_ids[b].size,
                tri[:, 0], tri[:, 1], tri[:, 2],
            ))

        self.vertices: list[_Vertex] = []
        self.base_topo = topological_order(base)
        for b in self.base_topo:
            if b == self.input_vertex:
                continue
            sigma = bp.sigma_ops[b].name
            vx = _Vertex(b, sigma, self.class_ids[b].size)
            vx.in_edges = [e for e in self.edges if e.dst == b]
            if sigma == "const_one":
                if vx.in_edges:
                    raise UnsupportedBlueprint("const_one vertices take no inputs")
            elif sigma == "scaled_bias":
                kinds = sorted(e.kind for e in vx.in_edges)
                if kinds != ["mul", "pair"]:
                    raise UnsupportedBlueprint(
                        "scaled_bias needs exactly one pair edge and one mul edge"
                    )
            elif sigma.startswith("sum_"):
                if any(e.kind != "mul" for e in vx.in_edges):
                    raise UnsupportedBlueprint("summing vertices take mul edges only")
                vx.act, vx.dact = _act_table(sigma)
            else:
                raise UnsupportedBlueprint(f"vertex map {sigma!r} not vectorized")
            self.vertices.append(vx)

        self.w_flat = np.zeros(lm.weight_bundle.total_dim)
        self._loaded = False

    # -- parameter plumbing ------------------------------------------------

    def get_flat(self) -> np.ndarray:
        return self.w_flat.copy()

    def set_flat(self, w: np.ndarray) -> None:
        w = np.asarray(w, dtype=np.float64).reshape(-1)
        if w.size != self.w_flat.size:
            raise ValueError(f"expected {self.w_flat.size} weights, got {w.size}")
        self.w_flat = w.copy()
        for e in self.edges:
            e.load(self.w_flat)
        self._loaded = True

    def set_section(self, w: Section) -> None:
        if w.bundle != self.lm.weight_bundle:
            raise ValueError("weight section bundle mismatch")
        self.set_flat(w.to_flat())

    def weights_section(self) -> Section:
        return Section.from_flat(self.lm.weight_bundle, self.w_flat)

    # -- forward / backward ------------------------------------------------

    def _forward(self, X: np.ndarray):
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != self.n_inputs:
            raise ValueError(f"inputs must be (batch, {self.n_inputs})")
        if not self._loaded:
            raise RuntimeError("weights not set")
        B = X.shape[0]
        acts = {self.input_vertex: X}
        z_at = {}
        for vx in self.vertices:
            if vx.sigma == "const_one":
                acts[vx.base] = np.ones((B, vx.width))
            elif vx.sigma == "scaled_bias":
                pair = next(e for e in vx.in_edges if e.kind == "pair")
                bias = next(e for e in vx.in_edges if e.kind == "mul")
                s = pair.apply(acts[pair.src])
                scale = np.where(pair.counts > 0, 1.0 / np.sqrt(np.maximum(pair.counts, 1.0)), 0.0)
                acts[vx.base] = s * scale + bias.apply(acts[bias.src])
            else:
                z = vx.in_edges[0].apply(acts[vx.in_edges[0].src])
                for e in vx.in_edges[1:]:
                    z = z + e.apply(acts[e.src])
                z_at[vx.base] = z
                acts[vx.base] = vx.act(z)
        return acts, z_at

    def predict(self, X: np.ndarray) -> np.ndarray:
        acts, _ = self._forward(X)
        return acts[self.terminal_vertex]

    def _loss_from_preds(self, P: np.ndarray, Y: np.ndarray) -> float:
        if self.loss == "mse":
            d = P - Y
            return float(np.mean(np.sum(d * d, axis=1)))
        m = P.max(axis=1, keepdims=True)
        lse = m[:, 0] + np.log(np.sum(np.exp(P - m), axis=1))
        return float(np.mean(lse - P[np.arange(P.shape[0]), Y]))

    def _pred_cotangent(self, P: np.ndarray, Y: np.ndarray) -> np.ndarray:
        B = P.shape[0]
        if self.loss == "mse":
            return 2.0 * (P - Y) / B
        m = P.max(axis=1, keepdims=True)
        e = np.exp(P - m)
        g = e / e.sum(axis=1, keepdims=True)
        g[np.arange(B), Y] -= 1.0
        return g / B

    def loss_value(self, X: np.ndarray, Y: np.ndarray) -> float:
        return self._loss_from_preds(self.predict(X), Y)

    def loss_and_grad(self, X: np.ndarray, Y: np.ndarray) -> tuple[float, np.ndarray]:
        acts, z_at = self._forward(X)
        P = acts[self.terminal_vertex]
        loss = self._loss_from_preds(P, Y)
        grad = np.zeros_like(self.w_flat)
        ct = {b: None for b in range(self.lm.blueprint.base.n_vertices)}
        ct[self.terminal_vertex] = self._pred_cotangent(P, Y)

        def push(e: _Edge, c: np.ndarray) -> None:
            e.grad(acts[e.src], c, grad)
            back = e.apply_t(c)
            ct[e.src] = back if ct[e.src] is None else ct[e.src] + back

        for vx in reversed(self.vertices):
            c = ct[vx.base]
            if c is None or vx.sigma == "const_one":
                continue
            if vx.sigma == "scaled_bias":
                pair = next(e for e in vx.in_edges if e.kind == "pair")
                bias = next(e for e in vx.in_edges if e.kind == "mul")
                scale = np.where(pair.counts > 0, 1.0 / np.sqrt(np.maximum(pair.counts, 1.0)), 0.0)
                push(pair, c * scale)
                push(bias, c)
            else:
                cz = c * vx.dact(z_at[vx.base])
                for e in vx.in_edges:
                    push(e, cz)
        return loss, grad


def identity_readout(lm: LiftedModule):
    """Frozen coefficients sqrt(m) * identity over the single terminal class.

    Under the 1/sqrt(m) readout normalization, output i is exactly the
    activation of the i-th terminal copy, matching FastScalarModule.predict.
    """
    from .modules import ReadoutCoeffs

    vs = lm.terminal_vertices
    m = len(vs)
    rows = tuple(np.sqrt(m) * np.eye(m)[:, [i]] for i in range(m))
    return ReadoutCoeffs(m, vs, rows)


@dataclass
class DenseMLP:
    """Plain fully connected ReLU classifier: x @ W + b per layer, no scaling."""

    sizes: tuple[int, ...]
    theta: np.ndarray
    loss: str = "xent"

    @classmethod
    def init(cls, sizes, rng: np.random.Generator, loss: str = "xent") -> "DenseMLP":
        parts = []
        for fan_in, fan_out in zip(sizes, sizes[1:]):
            parts.append(rng.normal(0.0, 1.0 / math.sqrt(fan_in), size=fan_in * fan_out))
            parts.append(rng.normal(0.0, 1.0, size=fan_out))
        return cls(tuple(int(s) for s in sizes), np.concatenate(parts), loss)

    def _views(self, theta: np.ndarray):
        out, off = [], 0
        for fan_in, fan_out in zip(self.sizes, self.sizes[1:]):
            W = theta[off : off + fan_in * fan_out].reshape(fan_in, fan_out)
            off += fan_in * fan_out
            b = theta[off : off + fan_out]
            off += fan_out
            out.append((W, b))
        return out

    def get_flat(self) -> np.ndarray:
        return self.theta.copy()

    def set_flat(self, theta: np.ndarray) -> None:
        self.theta = np.asarray(theta, dtype=np.float64).reshape(-1).copy()

    @property
    def n_parameters(self) -> int:
        return self.theta.size

    def predict(self, X: np.ndarray) -> np.ndarray:
        h = np.asarray(X, dtype=np.float64)
        layers = self._views(self.theta)
        for W, b in layers[:-1]:
            h = np.maximum(h @ W + b, 0.0)
        W, b = layers[-1]
        return h @ W + b

    def loss_value(self, X: np.ndarray, Y: np.ndarray) -> float:
        P = self.predict(X)
        if self.loss == "mse":
            d = P - Y
            return float(np.mean(np.sum(d * d, axis=1)))
        m = P.max(axis=1, keepdims=True)
        lse = m[:, 0] + np.log(np.sum(np.exp(P - m), axis=1))
        return float(np.mean(lse - P[np.arange(P.shape[0]), Y]))

    def loss_and_grad(self, X: np.ndarray, Y: np.ndarray) -> tuple[float, np.ndarray]:
        X = np.asarray(X, dtype=np.float64)
        layers = self._views(self.theta)
        hs = [X]
        zs = []
        h = X
        for W, b in layers[:-1]:
            z = h @ W + b
            zs.append(z)
            h = np.maximum(z, 0.0)
            hs.append(h)
        W, b = layers[-1]
        P = h @ W + b

        B = X.shape[0]
        if self.loss == "mse":
            d = P - Y
            loss = float(np.mean(np.sum(d * d, axis=1)))
            c = 2.0 * d / B
        else:
            m = P.max(axis=1, keepdims=True)
            e = np.exp(P - m)
            s = e.sum(axis=1, keepdims=True)
            loss = float(np.mean(np.log(s[:, 0]) + m[:, 0] - P[np.arange(B), Y]))
            c = e / s
            c[np.arange(B), Y] -= 1.0
            c /= B

        grad = np.zeros_like(self.theta)
        gviews = self._views(grad)
        for i in range(len(layers) - 1, -1, -1):
            gW, gb = gviews[i]
            gW += hs[i].T @ c
            gb += c.sum(axis=0)
            if i > 0:
                c = (c @ layers[i][0].T) * (zs[i - 1] > 0)
        return loss, grad


def fast_train(
    model,
    X: np.ndarray,
    Y: np.ndarray,
    opt: OptimizerConfig,
    eval_indices: np.ndarray | None = None,
) -> Trajectory:
    """Replicates run_optimizer (sampling, Adam constants, record cadence).

    ``eval_indices`` restricts the recorded loss to a fixed subsample, for
    datasets where full evaluations at every record point are too costly.
    """
    n = X.shape[0]
    if opt.batch > n:
        raise ValueError("batch size exceeds the dataset")
    if eval_indices is None:
        X_eval, Y_eval = X, Y
    else:
        X_eval, Y_eval = X[eval_indices], Y[eval_indices]
    rng = np.random.default_rng(opt.seed)
    theta0 = model.get_flat()
    theta = theta0.copy()
    m = np.zeros_like(theta)
    v = np.zeros_like(theta)
    times, losses, dists = [], [], []
    label = f"{opt.method} (heuristic)"

    def record(it: int) -> None:
        model.set_flat(theta)
        loss = model.loss_value(X_eval, Y_eval)
        if not math.isfinite(loss):
            raise NonFiniteLoss(
                f"loss became non-finite at iteration {it}",
                _partial(times, losses, dists, label),
            )
        times.append(float(it))
        losses.append(loss)
        dists.append(float(np.linalg.norm(theta - theta0)))

    record(0)
    for it in range(1, opt.iters + 1):
        idx = rng.integers(0, n, size=opt.batch)
        model.set_flat(theta)
        _, grad = model.loss_and_grad(X[idx], Y[idx])
        if opt.method == "sgd":
            theta -= opt.step * grad
        else:
            m = 0.9 * m + 0.1 * grad
            v = 0.999 * v + 0.001 * grad * grad
            mhat = m / (1.0 - 0.9**it)
            vhat = v / (1.0 - 0.999**it)
            theta -= opt.step * mhat / (np.sqrt(vhat) + 1e-8)
        if it % opt.record_every == 0 or it == opt.iters:
            record(it)
    model.set_flat(theta)
    return _finish(times, losses, dists, label)
