"""Reverse- and forward-mode differentiation over lifted modules.

There is no tape: the lifted graph is static, so the reverse sweep just walks
the topological order backwards. ``backward`` returns exact gradients of
``<out_cotangent, readout(a, forward(lm, w, x))>`` with respect to the edge
weights and the readout coefficients; ``jvp_forward`` pushes a tangent on
``(w, a)`` through to the output.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .bundles import Section
from .modules import LiftedModule, ReadoutCoeffs, _check_weights, MissingInput, ShapeMismatch

__all__ = ["GradientState", "backward", "jvp_forward", "pull_back"]


@dataclass(frozen=True)
class GradientState:
    """Cotangents mirroring the forward sections of one backward sweep."""

    act_cotangent: Section
    weight_cotangent: Section
    readout_cotangent: ReadoutCoeffs


def _forward_with_args(lm: LiftedModule, w: Section, x) -> tuple[list, list]:
    """Forward sweep that also keeps each vertex's summed class arguments."""
    acts: list = [None] * lm.lifted.n_vertices
    args_at: list = [None] * lm.lifted.n_vertices
    for v, name in lm.naming:
        if name not in x:
            raise MissingInput(name)
        val = np.asarray(x[name], dtype=np.float64).reshape(-1)
        if val.shape[0] != lm.activation_bundle.dims[v]:
            raise ShapeMismatch(
                f"input {name!r} has length {val.shape[0]}, "
                f"expected {lm.activation_bundle.dims[v]}"
            )
        acts[v] = val
    for v in lm._topo:
        if acts[v] is not None:
            continue
        bv, rows, class_dims = lm._wiring[v]
        sums: list = [None] * len(class_dims)
        for u, eidx, bidx, slot in rows:
            z = lm._m_prims[bidx].eval(w.values[eidx], acts[u])
            sums[slot] = z if sums[slot] is None else sums[slot] + z
        args = tuple(
            s if s is not None else np.zeros(class_dims[k]) for k, s in enumerate(sums)
        )
        args_at[v] = args
        acts[v] = lm._sigma_prims[bv].eval(*args)
    return acts, args_at


def _readout_pull(lm: LiftedModule, a: ReadoutCoeffs, acts: list, out_ct: np.ndarray):
    """Cotangents of the readout: per-coefficient blocks and per-vertex adds."""
    a.check_against(lm)
    pos = {v: i for i, v in enumerate(a.vertices)}
    ct_rows = [np.zeros_like(r) for r in a.rows]
    ct_acts = [np.zeros(d) for d in lm.activation_bundle.dims]
    for b, copies in lm.terminal_classes().items():
        if not copies:
            continue
        scale = 1.0 / np.sqrt(len(copies))
        for v in copies:
            ct_rows[pos[v]] = scale * np.outer(out_ct, acts[v])
            ct_acts[v] += scale * (a.rows[pos[v]].T @ out_ct)
    return ct_rows, ct_acts


def backward(
    lm: LiftedModule,
    w: Section,
    a: ReadoutCoeffs,
    x,
    out_cotangent: np.ndarray,
) -> GradientState:
    """Exact reverse sweep; linear in ``out_cotangent``.

    Runs one forward pass to populate activations, then one vjp per vertex
    and edge in reverse topological order.
    """
    acts, args_at = _forward_with_args(lm, w, x)
    return pull_back(lm, w, a, acts, args_at, out_cotangent)


def pull_back(
    lm: LiftedModule,
    w: Section,
    a: ReadoutCoeffs,
    acts: list,
    args_at: list,
    out_cotangent: np.ndarray,
) -> GradientState:
    """Reverse sweep from precomputed forward state (see ``_forward_with_args``)."""
    _check_weights(lm, w)
    out_ct = np.asarray(out_cotangent, dtype=np.float64).reshape(-1)
    if out_ct.shape[0] != a.k:
        raise ShapeMismatch(f"out_cotangent has length {out_ct.shape[0]}, readout has k={a.k}")
    ct_rows, ct_acts = _readout_pull(lm, a, acts, out_ct)
    ct_w = [np.zeros(d) for d in lm.weight_bundle.dims]
    for v in reversed(lm._topo):
        if lm._wiring[v] is None:
            continue
        ct_v = ct_acts[v]
        if not np.any(ct_v):
            continue
        bv, rows, class_dims = lm._wiring[v]
        class_cts = lm._sigma_prims[bv].vjp(args_at[v], ct_v)
        for u, eidx, bidx, slot in rows:
            gw, gy = lm._m_prims[bidx].vjp((w.values[eidx], acts[u]), class_cts[slot])
            ct_w[eidx] += gw
            ct_acts[u] += gy
    return GradientState(
        act_cotangent=Section(lm.activation_bundle, ct_acts),
        weight_cotangent=Section(lm.weight_bundle, ct_w),
        readout_cotangent=ReadoutCoeffs(a.k, a.vertices, tuple(ct_rows)),
    )


def jvp_forward(
    lm: LiftedModule,
    w: Section,
    a: ReadoutCoeffs,
    x,
    w_tangent: Section,
    a_tangent: ReadoutCoeffs,
) -> np.ndarray:
    """Directional derivative of the readout along a tangent on ``(w, a)``."""
    _check_weights(lm, w)
    if w_tangent.bundle != lm.weight_bundle:
        raise ShapeMismatch("weight tangent does not match the module")
    a.check_against(lm)
    a_tangent.check_against(lm)
    acts, args_at = _forward_with_args(lm, w, x)
    t_acts: list = [np.zeros(d) for d in lm.activation_bundle.dims]
    for v in lm._topo:
        if lm._wiring[v] is None:
            continue
        bv, rows, class_dims = lm._wiring[v]
        sums: list = [None] * len(class_dims)
        for u, eidx, bidx, slot in rows:
            tz = lm._m_prims[bidx].jvp(
                (w.values[eidx], acts[u]), (w_tangent.values[eidx], t_acts[u])
            )
            sums[slot] = tz if sums[slot] is None else sums[slot] + tz
        targs = tuple(
            s if s is not None else np.zeros(class_dims[k]) for k, s in enumerate(sums)
        )
        t_acts[v] = lm._sigma_prims[bv].jvp(args_at[v], targs)
    out = np.zeros(a.k)
    pos = {v: i for i, v in enumerate(a.vertices)}
    for b, copies in lm.terminal_classes().items():
        if not copies:
            continue
        scale = 1.0 / np.sqrt(len(copies))
        for v in copies:
            out += scale * (a_tangent.rows[pos[v]] @ acts[v])
            out += scale * (a.rows[pos[v]] @ t_acts[v])
    return out
