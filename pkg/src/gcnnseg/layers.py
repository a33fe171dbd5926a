"""Equivariant layers: forward and backward passes.

Planar maps are ``[B, C, H, W]``; group maps are ``[B, C, S, H, W]`` with ``S``
the stabilizer size.  Convolutions lower to a single planar correlation by
expanding the stored filter into all its transformed copies through the
group's :class:`~gcnnseg.groups.IndexTable` and fusing the ``(C, S)`` axes.

Each ``*_forward`` returns ``(out, cache)``; the matching ``*_backward`` takes
``(dout, cache)`` and returns the input gradient plus parameter gradients.
"""
from __future__ import annotations

from typing import Callable

import numpy as np

from . import groups as G
from .groups import GroupElement, GroupSpec, IndexTable
from .tensor import (
    conv_output_size,
    correlate2d,
    correlate2d_filter_grad,
    correlate2d_transposed,
)


class StateError(RuntimeError):
    """Backward called without a matching forward cache."""


class GridAlignmentError(ValueError):
    """Pooling grid that cannot be rotated onto itself."""


TableFactory = Callable[[GroupSpec, int], IndexTable]


def _table(group: GroupSpec, k: int, table: IndexTable | None) -> IndexTable:
    if table is None:
        return G.index_table(group, k)
    if table.group != group or table.kernel_size != k:
        raise ValueError("index table does not match group/kernel size")
    return table


def _scatter(d: np.ndarray, idx: np.ndarray, n: int) -> np.ndarray:
    """Adjoint of ``w[..., idx]`` for ``idx`` of shape ``[S, n]`` whose rows are permutations."""
    out = np.zeros(d.shape[:-2] + (n,), dtype=d.dtype)
    for s in range(idx.shape[0]):
        out[..., idx[s]] += d[..., s, :]
    return out


def _fuse(x: np.ndarray) -> np.ndarray:
    b, c, s, h, w = x.shape
    return x.reshape(b, c * s, h, w)


def _check_group_map(x: np.ndarray, group: GroupSpec) -> None:
    if x.ndim != 5 or x.shape[2] != group.stabilizer_size:
        raise ValueError(f"expected [B, C, {group.stabilizer_size}, H, W] for {group.name}, got {x.shape}")


# --------------------------------------------------------------------------
# filter expansion


def expand_lifting_filter(weight: np.ndarray, group: GroupSpec, table: IndexTable | None = None) -> np.ndarray:
    """``[Cout, Cin, k, k] -> [Cout*S, Cin, k, k]``, one transformed copy per orientation."""
    cout, cin, k, _ = weight.shape
    t = _table(group, k, table)
    e = weight.reshape(cout, cin, k * k)[..., t.spatial_flat]  # [Cout, Cin, S, k*k]
    return e.transpose(0, 2, 1, 3).reshape(cout * group.stabilizer_size, cin, k, k)


def expand_group_filter(weight: np.ndarray, group: GroupSpec, table: IndexTable | None = None) -> np.ndarray:
    """``[Cout, Cin, S, k, k] -> [Cout*S, Cin*S, k, k]``."""
    cout, cin, s, k, _ = weight.shape
    t = _table(group, k, table)
    e = weight.reshape(cout, cin, s * k * k)[..., t.flat]  # [Cout, Cin, S_out, S*k*k]
    e = e.reshape(cout, cin, s, s, k, k).transpose(0, 2, 1, 3, 4, 5)
    return e.reshape(cout * s, cin * s, k, k)


def expand_projection_filter(weight: np.ndarray, group: GroupSpec, table: IndexTable | None = None) -> np.ndarray:
    """``[Cout, Cin, k, k] -> [Cout, Cin*S, k, k]``."""
    cout, cin, k, _ = weight.shape
    t = _table(group, k, table)
    e = weight.reshape(cout, cin, k * k)[..., t.spatial_flat]
    return e.reshape(cout, cin * group.stabilizer_size, k, k)


def _lifting_filter_grad(de: np.ndarray, group: GroupSpec, table: IndexTable | None) -> np.ndarray:
    cout_s, cin, k, _ = de.shape
    s = group.stabilizer_size
    t = _table(group, k, table)
    d = de.reshape(cout_s // s, s, cin, k * k).transpose(0, 2, 1, 3)
    return _scatter(d, t.spatial_flat, k * k).reshape(cout_s // s, cin, k, k)


def _group_filter_grad(de: np.ndarray, group: GroupSpec, table: IndexTable | None) -> np.ndarray:
    s = group.stabilizer_size
    k = de.shape[-1]
    cout, cin = de.shape[0] // s, de.shape[1] // s
    t = _table(group, k, table)
    d = de.reshape(cout, s, cin, s, k, k).transpose(0, 2, 1, 3, 4, 5).reshape(cout, cin, s, s * k * k)
    return _scatter(d, t.flat, s * k * k).reshape(cout, cin, s, k, k)


def _projection_filter_grad(de: np.ndarray, group: GroupSpec, table: IndexTable | None) -> np.ndarray:
    s = group.stabilizer_size
    cout, cin_s, k, _ = de.shape
    t = _table(group, k, table)
    d = de.reshape(cout, cin_s // s, s, k * k)
    return _scatter(d, t.spatial_flat, k * k).reshape(cout, cin_s // s, k, k)


# --------------------------------------------------------------------------
# convolutions


def lift_conv_forward(x, weight, bias, group: GroupSpec, pad: int = 0, table: IndexTable | None = None):
    """Z2 -> G correlation: every orientation slice sees the input through a transformed filter."""
    if x.ndim != 4:
        raise ValueError(f"lifting conv expects a planar [B, C, H, W] map, got {x.shape}")
    e = expand_lifting_filter(weight, group, table)
    out = correlate2d(x, e, 1, pad)
    b, _, h, w = out.shape
    out = out.reshape(b, weight.shape[0], group.stabilizer_size, h, w)
    if bias is not None:
        out += bias[None, :, None, None, None]
    return out, (x, e, group, pad, table)


def lift_conv_backward(dout, cache):
    x, e, group, pad, table = cache
    d = _fuse(dout)
    dx = correlate2d_transposed(d, e, 1, pad, out_size=x.shape[2:])
    dw = _lifting_filter_grad(correlate2d_filter_grad(x, d, e.shape[-1], 1, pad), group, table)
    return dx, dw, dout.sum(axis=(0, 2, 3, 4))


def group_conv_forward(x, weight, bias, group: GroupSpec, stride: int = 1, pad: int = 0, table: IndexTable | None = None):
    """G -> G correlation with filters defined on the group."""
    _check_group_map(x, group)
    if stride < 1:
        raise ValueError("stride must be >= 1")
    e = expand_group_filter(weight, group, table)
    out = correlate2d(_fuse(x), e, stride, pad)
    b, _, h, w = out.shape
    out = out.reshape(b, weight.shape[0], group.stabilizer_size, h, w)
    if bias is not None:
        out += bias[None, :, None, None, None]
    return out, (x.shape, _fuse(x), e, group, stride, pad, table)


def group_conv_backward(dout, cache):
    xshape, xf, e, group, stride, pad, table = cache
    d = _fuse(dout)
    dx = correlate2d_transposed(d, e, stride, pad, out_size=xshape[3:]).reshape(xshape)
    dw = _group_filter_grad(correlate2d_filter_grad(xf, d, e.shape[-1], stride, pad), group, table)
    return dx, dw, dout.sum(axis=(0, 2, 3, 4))


def proj_conv_forward(x, weight, bias, group: GroupSpec, pad: int = 0, table: IndexTable | None = None):
    """G -> Z2 correlation with one planar filter shared across orientations."""
    _check_group_map(x, group)
    e = expand_projection_filter(weight, group, table)
    out = correlate2d(_fuse(x), e, 1, pad)
    if bias is not None:
        out += bias[None, :, None, None]
    return out, (x.shape, _fuse(x), e, group, pad, table)


def proj_conv_backward(dout, cache):
    xshape, xf, e, group, pad, table = cache
    dx = correlate2d_transposed(dout, e, 1, pad, out_size=xshape[3:]).reshape(xshape)
    dw = _projection_filter_grad(correlate2d_filter_grad(xf, dout, e.shape[-1], 1, pad), group, table)
    return dx, dw, dout.sum(axis=(0, 2, 3))


def group_transposed_conv_forward(
    x, weight, bias, group: GroupSpec, stride: int = 1, pad: int = 0, table: IndexTable | None = None
):
    """Adjoint of :func:`group_conv_forward` for the same filter bank.

    ``weight`` is ``[A, B, S, k, k]``: the bank of a group conv mapping ``B``
    channels to ``A``.  The transposed layer maps ``A`` channels to ``B``; its
    bias has ``B`` entries.
    """
    _check_group_map(x, group)
    if x.shape[1] != weight.shape[0]:
        raise ValueError(f"transposed conv expects {weight.shape[0]} input channels, got {x.shape[1]}")
    e = expand_group_filter(weight, group, table)
    out = correlate2d_transposed(_fuse(x), e, stride, pad)
    b, _, h, w = out.shape
    out = out.reshape(b, weight.shape[1], group.stabilizer_size, h, w)
    if bias is not None:
        out += bias[None, :, None, None, None]
    return out, (x.shape, _fuse(x), e, group, stride, pad, table)


def group_transposed_conv_backward(dout, cache):
    xshape, xf, e, group, stride, pad, table = cache
    d = _fuse(dout)
    dx = correlate2d(d, e, stride, pad)[:, :, : xshape[3], : xshape[4]].reshape(xshape)
    de = correlate2d_filter_grad(d, xf, e.shape[-1], stride, pad)
    dw = _group_filter_grad(de, group, table)
    return dx, dw, dout.sum(axis=(0, 2, 3, 4))


# --------------------------------------------------------------------------
# normalisation, pooling, nonlinearity


class GroupBatchNormState:
    """Per-feature-channel affine parameters and running moments.

    Moments pool over batch, orientation and both spatial axes, so one
    ``(gamma, beta)`` pair serves all orientation channels of a feature.
    """

    def __init__(self, channels: int, momentum: float = 0.1, epsilon: float = 1e-5, dtype=np.float64):
        self.gamma = np.ones(channels, dtype=dtype)
        self.beta = np.zeros(channels, dtype=dtype)
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.momentum = momentum
        self.epsilon = epsilon


_BN_AXES = (0, 2, 3, 4)


def _bc(v: np.ndarray) -> np.ndarray:
    return v[None, :, None, None, None]


def group_batchnorm_forward(x, st: GroupBatchNormState, mode: str = "train"):
    if x.ndim != 5:
        raise ValueError(f"group batch norm expects [B, C, S, H, W], got {x.shape}")
    if mode == "train":
        n = x.size // x.shape[1]
        if n < 2:
            raise ValueError("train-mode batch norm needs at least two values per channel")
        mean = x.mean(axis=_BN_AXES)
        var = ((x - _bc(mean)) ** 2).mean(axis=_BN_AXES)
        m = st.momentum
        st.running_mean = ((1 - m) * st.running_mean + m * mean).astype(st.running_mean.dtype)
        st.running_var = ((1 - m) * st.running_var + m * var * n / (n - 1)).astype(st.running_var.dtype)
    elif mode == "eval":
        mean, var = st.running_mean, st.running_var
    else:
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    inv_std = 1.0 / np.sqrt(var + st.epsilon)
    xhat = (x - _bc(mean)) * _bc(inv_std)
    out = xhat * _bc(st.gamma) + _bc(st.beta)
    return out.astype(x.dtype, copy=False), (xhat, inv_std, st.gamma, mode)


def group_batchnorm_backward(dout, cache):
    xhat, inv_std, gamma, mode = cache
    dgamma = (dout * xhat).sum(axis=_BN_AXES)
    dbeta = dout.sum(axis=_BN_AXES)
    dxhat = dout * _bc(gamma)
    if mode == "eval":
        return dxhat * _bc(inv_std), dgamma, dbeta
    n = dout.size // dout.shape[1]
    dx = _bc(inv_std / n) * (
        n * dxhat - _bc(dxhat.sum(axis=_BN_AXES)) - xhat * _bc((dxhat * xhat).sum(axis=_BN_AXES))
    )
    return dx.astype(dout.dtype, copy=False), dgamma, dbeta


def maxpool2d_forward(x, k: int = 3, stride: int = 2, pad: int = 1, strict: bool = True):
    """Spatial max pooling over the last two axes; padding never wins."""
    *lead, h, w = x.shape
    if strict and (h % 2 == 0 or w % 2 == 0 or h != w):
        raise GridAlignmentError(
            f"pooling a {h}x{w} map breaks quarter-turn equivariance; use an odd square size such as {h | 1}"
        )
    oh, ow = conv_output_size(h, k, stride, pad), conv_output_size(w, k, stride, pad)
    flat = x.reshape(-1, h, w)
    padded = np.full((flat.shape[0], h + 2 * pad, w + 2 * pad), -np.inf, dtype=x.dtype)
    padded[:, pad : pad + h, pad : pad + w] = flat
    win = np.lib.stride_tricks.sliding_window_view(padded, (k, k), axis=(1, 2))[:, ::stride, ::stride][:, :oh, :ow]
    win = win.reshape(flat.shape[0], oh, ow, k * k)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    return out.reshape(*lead, oh, ow), (x.shape, arg, k, stride, pad)


def maxpool2d_backward(dout, cache):
    xshape, arg, k, stride, pad = cache
    *lead, h, w = xshape
    n, oh, ow = arg.shape
    ph, pw = h + 2 * pad, w + 2 * pad
    rows = np.arange(oh)[:, None] * stride + arg // k
    cols = np.arange(ow)[None, :] * stride + arg % k
    flat_idx = (np.arange(n)[:, None, None] * ph + rows) * pw + cols
    grad = np.bincount(flat_idx.ravel(), weights=dout.reshape(-1).astype(np.float64), minlength=n * ph * pw)
    grad = grad.reshape(n, ph, pw)[:, pad : pad + h, pad : pad + w]
    return grad.reshape(xshape).astype(dout.dtype)


def relu_forward(x):
    return np.maximum(x, 0), x > 0


def relu_backward(dout, mask):
    return dout * mask


# --------------------------------------------------------------------------
# group actions on feature maps


def apply_input_transform(g: GroupElement, f: np.ndarray) -> np.ndarray:
    """Roto-reflect a planar map (or any array) over its last two axes."""
    if f.shape[-1] != f.shape[-2]:
        raise ValueError(f"roto-reflections need a square map, got {f.shape[-2:]}")
    return G.transform_planar(f, g)


def apply_group_transform(g: GroupElement, f: np.ndarray, group: GroupSpec) -> np.ndarray:
    """Roto-reflect a group map spatially and move orientation ``s`` to ``g s``."""
    _check_group_map(f, group)
    g = G.check_element(g, group)
    spatial = apply_input_transform(g, f)
    elems = group.elements
    out = np.empty_like(spatial)
    for i, s in enumerate(elems):
        out[:, :, elems.index(G.compose(g, s, group))] = spatial[:, :, i]
    return out


# --------------------------------------------------------------------------
# stateful layer wrappers used by the model


class Layer:
    """Holds parameters, the last forward cache, and parameter gradients."""

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self._cache = None

    def forward(self, x, train: bool = True):
        raise NotImplementedError

    def _pop_cache(self):
        if self._cache is None:
            raise StateError(f"{type(self).__name__}.backward called before forward")
        cache, self._cache = self._cache, None
        return cache


def he_uniform(rng: np.random.Generator, shape, fan_in: int, dtype) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class LiftConv(Layer):
    def __init__(self, cin, cout, group, k=3, rng=None, dtype=np.float64, table_factory: TableFactory | None = None):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        self.group, self.pad = group, k // 2
        self.table = (table_factory or G.index_table)(group, k)
        self.params["weight"] = he_uniform(rng, (cout, cin, k, k), cin * k * k, dtype)
        self.params["bias"] = np.zeros(cout, dtype=dtype)

    def forward(self, x, train=True):
        out, self._cache = lift_conv_forward(x, self.params["weight"], self.params["bias"], self.group, self.pad, self.table)
        return out

    def backward(self, dout):
        dx, self.grads["weight"], self.grads["bias"] = lift_conv_backward(dout, self._pop_cache())
        return dx


class GroupConv(Layer):
    def __init__(self, cin, cout, group, k=3, rng=None, dtype=np.float64, table_factory: TableFactory | None = None):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        s = group.stabilizer_size
        self.group, self.pad = group, k // 2
        self.table = (table_factory or G.index_table)(group, k)
        self.params["weight"] = he_uniform(rng, (cout, cin, s, k, k), cin * s * k * k, dtype)
        self.params["bias"] = np.zeros(cout, dtype=dtype)

    def forward(self, x, train=True):
        out, self._cache = group_conv_forward(
            x, self.params["weight"], self.params["bias"], self.group, 1, self.pad, self.table
        )
        return out

    def backward(self, dout):
        dx, self.grads["weight"], self.grads["bias"] = group_conv_backward(dout, self._pop_cache())
        return dx


class GroupTransposedConv(Layer):
    """Up-sampling layer; stride 2 / pad 1 maps size ``n`` to ``2n - 1``."""

    def __init__(self, cin, cout, group, k=3, stride=2, pad=1, rng=None, dtype=np.float64,
                 table_factory: TableFactory | None = None):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        s = group.stabilizer_size
        self.group, self.stride, self.pad = group, stride, pad
        self.table = (table_factory or G.index_table)(group, k)
        self.params["weight"] = he_uniform(rng, (cin, cout, s, k, k), cin * s * k * k, dtype)
        self.params["bias"] = np.zeros(cout, dtype=dtype)

    def forward(self, x, train=True):
        out, self._cache = group_transposed_conv_forward(
            x, self.params["weight"], self.params["bias"], self.group, self.stride, self.pad, self.table
        )
        return out

    def backward(self, dout):
        dx, self.grads["weight"], self.grads["bias"] = group_transposed_conv_backward(dout, self._pop_cache())
        return dx


class ProjConv(Layer):
    def __init__(self, cin, cout, group, k=3, rng=None, dtype=np.float64, table_factory: TableFactory | None = None):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        s = group.stabilizer_size
        self.group, self.pad = group, k // 2
        self.table = (table_factory or G.index_table)(group, k)
        self.params["weight"] = he_uniform(rng, (cout, cin, k, k), cin * s * k * k, dtype)
        self.params["bias"] = np.zeros(cout, dtype=dtype)

    def forward(self, x, train=True):
        out, self._cache = proj_conv_forward(x, self.params["weight"], self.params["bias"], self.group, self.pad, self.table)
        return out

    def backward(self, dout):
        dx, self.grads["weight"], self.grads["bias"] = proj_conv_backward(dout, self._pop_cache())
        return dx


class GroupBatchNorm(Layer):
    def __init__(self, channels, momentum=0.1, epsilon=1e-5, dtype=np.float64):
        super().__init__()
        self.state = GroupBatchNormState(channels, momentum, epsilon, dtype)
        # parameters are shared with the state object
        self.params["gamma"] = self.state.gamma
        self.params["beta"] = self.state.beta

    @property
    def buffers(self) -> dict[str, np.ndarray]:
        return {"running_mean": self.state.running_mean, "running_var": self.state.running_var}

    def forward(self, x, train=True):
        self.state.gamma, self.state.beta = self.params["gamma"], self.params["beta"]
        out, self._cache = group_batchnorm_forward(x, self.state, "train" if train else "eval")
        return out

    def backward(self, dout):
        dx, self.grads["gamma"], self.grads["beta"] = group_batchnorm_backward(dout, self._pop_cache())
        return dx


class ReLU(Layer):
    def forward(self, x, train=True):
        out, self._cache = relu_forward(x)
        return out

    def backward(self, dout):
        return relu_backward(dout, self._pop_cache())


class MaxPool(Layer):
    def __init__(self, strict: bool = True):
        super().__init__()
        self.strict = strict

    def forward(self, x, train=True):
        out, self._cache = maxpool2d_forward(x, 3, 2, 1, self.strict)
        return out

    def backward(self, dout):
        return maxpool2d_backward(dout, self._pop_cache())
