"""Slow direct-sum evaluations of the lifting, group and projection correlations.

Nothing here shares lowering code with :mod:`gcnnseg.layers`: filters are
evaluated at ``g^-1 h`` by composing stabilizer parts with
:func:`gcnnseg.groups.compose` and moving centred offsets with integer
matrices.  Translations are handled by array slicing over output positions,
every group element and filter offset is an explicit loop.
"""
from __future__ import annotations

from typing import Callable

import numpy as np

from . import groups as G
from .groups import GroupSpec


def _offsets(k: int):
    c = k // 2
    return [(a, b) for a in range(-c, c + 1) for b in range(-c, c + 1)]


def _filter_at(psi: np.ndarray, v: np.ndarray) -> np.ndarray | None:
    """``psi`` evaluated at centred offset ``v``; ``None`` outside its support."""
    k = psi.shape[-1]
    c = k // 2
    a, b = int(v[0]), int(v[1])
    if abs(a) > c or abs(b) > c:
        return None
    return psi[..., a + c, b + c]


def _shifted(f: np.ndarray, t0: int, stride: int, n_out: int, off: int, axis: int) -> np.ndarray:
    """Values ``f[..., stride*i + t0 + off]`` for ``i < n_out`` along ``axis``, zero outside."""
    n = f.shape[axis]
    idx = stride * np.arange(n_out) + t0 + off
    ok = (idx >= 0) & (idx < n)
    taken = np.take(f, np.clip(idx, 0, n - 1), axis=axis)
    shape = [1] * f.ndim
    shape[axis] = n_out
    return taken * ok.reshape(shape)


def _gather(f: np.ndarray, v, t0: int, stride: int, n_out: tuple[int, int]) -> np.ndarray:
    rows = _shifted(f, t0, stride, n_out[0], v[0], f.ndim - 2)
    return _shifted(rows, t0, stride, n_out[1], v[1], f.ndim - 1)


def _out_size(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


def direct_lift(f: np.ndarray, weights: np.ndarray, group: GroupSpec, pad: int = 0) -> np.ndarray:
    """``out[b, o, g] = sum_y sum_c f_c(y) psi_{o,c}(g^-1 y)`` for ``f`` of shape ``[B, C, H, W]``."""
    b, cin, h, w = f.shape
    cout, _, k, _ = weights.shape
    c = k // 2
    oh, ow = _out_size(h, k, 1, pad), _out_size(w, k, 1, pad)
    elems = G.stabilizer(group)
    out = np.zeros((b, cout, len(elems), oh, ow))
    t0 = c - pad  # input position of the translation part of output (0, 0)
    for si, s in enumerate(elems):
        s_inv = G.action_matrix(G.inverse(s, group))
        for v in _offsets(k):
            # y = t + v, so g^-1 y = s^-1 v
            tap = _filter_at(weights, s_inv @ np.array(v))
            vals = _gather(f, v, t0, 1, (oh, ow))  # [B, C, oh, ow]
            out[:, :, si] += np.einsum("bchw,oc->bohw", vals, tap)
    return out


def direct_group(f: np.ndarray, weights: np.ndarray, group: GroupSpec, stride: int = 1, pad: int = 0) -> np.ndarray:
    """``out[b, o, g] = sum_h sum_c f_c(h) psi_{o,c}(g^-1 h)``; ``f`` is ``[B, C, S, H, W]``."""
    b, cin, s_size, h, w = f.shape
    cout, _, _, k, _ = weights.shape
    c = k // 2
    oh, ow = _out_size(h, k, stride, pad), _out_size(w, k, stride, pad)
    elems = G.stabilizer(group)
    out = np.zeros((b, cout, s_size, oh, ow))
    t0 = c - pad
    for gi, g in enumerate(elems):
        g_inv = G.inverse(g, group)
        mat = G.action_matrix(g_inv)
        for hi, hs in enumerate(elems):
            rel = elems.index(G.compose(g_inv, hs, group))  # stabilizer part of g^-1 h
            for v in _offsets(k):
                tap = _filter_at(weights[:, :, rel], mat @ np.array(v))
                vals = _gather(f[:, :, hi], v, t0, stride, (oh, ow))
                out[:, :, gi] += np.einsum("bchw,oc->bohw", vals, tap)
    return out


def direct_proj(f: np.ndarray, weights: np.ndarray, group: GroupSpec, pad: int = 0) -> np.ndarray:
    """``out[b, o, y] = sum_h sum_c f_c(h) psi_{o,c}(z(y)^-1 h)``.

    ``z(y)^-1 h`` has stabilizer part ``s`` and offset ``v = t - y``; the planar
    filter is read there as ``psi(s^-1 v)``.
    """
    b, cin, s_size, h, w = f.shape
    cout, _, k, _ = weights.shape
    c = k // 2
    oh, ow = _out_size(h, k, 1, pad), _out_size(w, k, 1, pad)
    elems = G.stabilizer(group)
    out = np.zeros((b, cout, oh, ow))
    t0 = c - pad
    for hi, hs in enumerate(elems):
        mat = G.action_matrix(G.inverse(hs, group))
        for v in _offsets(k):
            tap = _filter_at(weights, mat @ np.array(v))
            vals = _gather(f[:, :, hi], v, t0, 1, (oh, ow))
            out += np.einsum("bchw,oc->bohw", vals, tap)
    return out


def dense_matrix(op: Callable[[np.ndarray], np.ndarray], sample_shape: tuple[int, ...]) -> np.ndarray:
    """Matrix of a batched linear map on single samples of ``sample_shape``.

    All basis vectors are probed in one call, stacked along the batch axis;
    column ``i`` of the result is ``op(e_i)``.
    """
    n = int(np.prod(sample_shape))
    basis = np.eye(n).reshape((n,) + tuple(sample_shape))
    return np.asarray(op(basis), dtype=np.float64).reshape(n, -1).T


def direct_adjoint(op: Callable[[np.ndarray], np.ndarray], sample_shape: tuple[int, ...], y: np.ndarray) -> np.ndarray:
    """Apply the explicit transpose of ``op`` to every sample of the batch ``y``."""
    mat = dense_matrix(op, sample_shape)
    y = np.asarray(y, dtype=np.float64)
    return (y.reshape(y.shape[0], -1) @ mat).reshape((y.shape[0],) + tuple(sample_shape))


def direct_transposed_group(
    y: np.ndarray, weights: np.ndarray, group: GroupSpec, stride: int = 1, pad: int = 0
) -> np.ndarray:
    """Transposed group correlation via the dense matrix of :func:`direct_group`."""
    _, _, s_size, h, w = y.shape
    k = weights.shape[-1]
    n = (h - 1) * stride - 2 * pad + k
    m = (w - 1) * stride - 2 * pad + k
    sample = (weights.shape[1], s_size, n, m)
    return direct_adjoint(lambda x: direct_group(x, weights, group, stride, pad), sample, y)
