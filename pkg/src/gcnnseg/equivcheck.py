"""Invariant suite: layer equivariance, oracle agreement, adjoint identities and
finite-difference gradient checks, plus whole-network equivariance."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import groups as G
from . import layers as L
from . import oracle as O
from .groups import GroupSpec
from .model import GUNet, nearest_valid_size
from .tensor import correlate2d, correlate2d_transposed


@dataclass
class CheckResult:
    name: str
    max_error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return bool(self.max_error < self.tolerance)

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status}  {self.name:<44s} max_err={self.max_error:.3e}  tol={self.tolerance:.0e}"

    def as_dict(self) -> dict:
        return {"name": self.name, "max_error": self.max_error, "tolerance": self.tolerance, "passed": self.passed}


def numerical_gradient(f: Callable[[], float], x: np.ndarray, index: tuple, step: float = 1e-5) -> float:
    """Central difference of ``f`` with respect to ``x[index]`` (perturbs ``x`` in place)."""
    old = x[index]
    x[index] = old + step
    fp = f()
    x[index] = old - step
    fm = f()
    x[index] = old
    return (fp - fm) / (2 * step)


def relative_error(a: float, b: float, floor: float = 1e-4) -> float:
    # Below ``floor`` the error is effectively absolute: central differences of an
    # O(1) loss carry ~1e-9 of round-off, which swamps exactly-zero gradients
    # such as conv biases feeding a batch norm.
    return abs(a - b) / max(abs(a), abs(b), floor)


def _probe_indices(rng: np.random.Generator, shape: tuple, n: int) -> list[tuple]:
    return [tuple(int(rng.integers(0, s)) for s in shape) for _ in range(n)]


def gradient_check(forward: Callable[[], np.ndarray], backward: Callable[[np.ndarray], dict],
                   arrays: dict[str, np.ndarray], rng: np.random.Generator, probes: int = 10) -> float:
    """Worst relative error between analytic and central-difference gradients.

    The scalar loss is ``sum(w * forward())`` with a fixed random ``w``;
    ``backward(w)`` must return gradients keyed like ``arrays``.
    """
    out = forward()
    w = rng.standard_normal(out.shape)

    def loss() -> float:
        return float(np.sum(w * forward()))

    forward()
    analytic = backward(w)
    worst = 0.0
    for name, arr in arrays.items():
        for idx in _probe_indices(rng, arr.shape, probes):
            num = numerical_gradient(loss, arr, idx)
            worst = max(worst, relative_error(float(analytic[name][idx]), num))
    return worst


# --------------------------------------------------------------------------
# individual checks


def _random_map(rng, group: GroupSpec, c=2, n=9, b=2):
    return rng.standard_normal((b, c, group.stabilizer_size, n, n))


def layer_equivariance(group: GroupSpec, seed: int = 0, n: int = 9, k: int = 3,
                       table_factory=None) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    tf = table_factory or G.index_table
    tab = tf(group, k)
    S = group.stabilizer_size
    x = rng.standard_normal((2, 3, n, n))
    f = _random_map(rng, group, 3, n)
    w_lift = rng.standard_normal((4, 3, k, k))
    w_grp = rng.standard_normal((4, 3, S, k, k))
    w_proj = rng.standard_normal((2, 3, k, k))
    w_t = rng.standard_normal((3, 4, S, k, k))
    bn = L.GroupBatchNormState(3)
    bn.gamma, bn.beta = rng.standard_normal(3), rng.standard_normal(3)
    pad = k // 2

    ops: dict[str, tuple[Callable, np.ndarray, str]] = {
        "lift": (lambda a: L.lift_conv_forward(a, w_lift, None, group, pad, tab)[0], x, "planar->group"),
        "group": (lambda a: L.group_conv_forward(a, w_grp, None, group, 1, pad, tab)[0], f, "group->group"),
        "proj": (lambda a: L.proj_conv_forward(a, w_proj, None, group, pad, tab)[0], f, "group->planar"),
        "batchnorm": (lambda a: L.group_batchnorm_forward(a, bn, "train")[0], f, "group->group"),
        "relu": (lambda a: L.relu_forward(a)[0], f, "group->group"),
        "maxpool": (lambda a: L.maxpool2d_forward(a)[0], f, "group->group"),
    }
    for s in (1, 2, 3):
        ops[f"transposed(stride={s})"] = (
            lambda a, s=s: L.group_transposed_conv_forward(a, w_t, None, group, s, pad, tab)[0], f, "group->group"
        )
    results = []
    for name, (op, inp, kind) in ops.items():
        src, dst = kind.split("->")
        base = op(inp)
        err = 0.0
        for g in group.elements:
            t_in = L.apply_input_transform(g, inp) if src == "planar" else L.apply_group_transform(g, inp, group)
            expect = L.apply_input_transform(g, base) if dst == "planar" else L.apply_group_transform(g, base, group)
            err = max(err, float(np.abs(op(t_in) - expect).max()))
        results.append(CheckResult(f"equivariance/{group.name}/{name}", err, 1e-10))

    # translations, the part of the group every model has
    m = k + 2
    xt = np.zeros((1, 3, n + 2 * m, n + 2 * m))
    xt[:, :, m:-m, m:-m] = rng.standard_normal((1, 3, n, n))
    lift = lambda a: L.lift_conv_forward(a, w_lift, None, group, pad, tab)[0]  # noqa: E731
    shifted = lift(np.roll(xt, (1, 2), axis=(2, 3)))
    expect = np.roll(lift(xt), (1, 2), axis=(3, 4))
    results.append(CheckResult(f"equivariance/{group.name}/translation", float(np.abs(shifted - expect).max()), 1e-10))
    return results


def oracle_agreement(group: GroupSpec, seeds=range(3), ks=(1, 3, 5), strides=(1, 2)) -> list[CheckResult]:
    worst = {"lift": 0.0, "group": 0.0, "proj": 0.0, "transposed": 0.0}
    S = group.stabilizer_size
    for seed in seeds:
        rng = np.random.default_rng(seed)
        for k in ks:
            pad = k // 2
            x = rng.standard_normal((1, 2, 5, 5))
            f = rng.standard_normal((1, 2, S, 5, 5))
            wl = rng.standard_normal((2, 2, k, k))
            wp = rng.standard_normal((2, 2, k, k))
            worst["lift"] = max(worst["lift"], float(np.abs(
                L.lift_conv_forward(x, wl, None, group, pad)[0] - O.direct_lift(x, wl, group, pad)).max()))
            worst["proj"] = max(worst["proj"], float(np.abs(
                L.proj_conv_forward(f, wp, None, group, pad)[0] - O.direct_proj(f, wp, group, pad)).max()))
            for s in strides:
                wg = rng.standard_normal((2, 2, S, k, k))
                worst["group"] = max(worst["group"], float(np.abs(
                    L.group_conv_forward(f, wg, None, group, s, pad)[0] - O.direct_group(f, wg, group, s, pad)).max()))
                y = rng.standard_normal((1, 2, S, 3, 3))
                worst["transposed"] = max(worst["transposed"], float(np.abs(
                    L.group_transposed_conv_forward(y, wg, None, group, s, pad)[0]
                    - O.direct_transposed_group(y, wg, group, s, pad)).max()))
    return [CheckResult(f"oracle/{group.name}/{name}", err, 1e-10) for name, err in worst.items()]


def adjoint_identity(group: GroupSpec, seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    planar, grouped = 0.0, 0.0
    S = group.stabilizer_size
    for s in (1, 2, 3):
        for p in (0, 1):
            for k in (1, 3, 5):
                n = 9
                w = rng.standard_normal((3, 2, k, k))
                x = rng.standard_normal((2, n, n))
                y = rng.standard_normal(correlate2d(x, w, s, p).shape)
                lhs = np.vdot(correlate2d(x, w, s, p), y)
                rhs = np.vdot(x, correlate2d_transposed(y, w, s, p, out_size=(n, n)))
                planar = max(planar, abs(lhs - rhs) / max(1.0, abs(lhs)))
                wg = rng.standard_normal((3, 2, S, k, k))
                yg = rng.standard_normal((1, 3, S, 4, 4))
                out = L.group_transposed_conv_forward(yg, wg, None, group, s, p)[0]
                xg = rng.standard_normal(out.shape)
                lhs = np.vdot(L.group_conv_forward(xg, wg, None, group, s, p)[0], yg)
                rhs = np.vdot(xg, out)
                grouped = max(grouped, abs(lhs - rhs) / max(1.0, abs(lhs)))
    return [CheckResult("adjoint/correlate2d", planar, 1e-10),
            CheckResult(f"adjoint/{group.name}/transposed_group_conv", grouped, 1e-10)]


def layer_gradients(group: GroupSpec, seed: int = 0, probes: int = 10) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    S = group.stabilizer_size
    k, pad = 3, 1
    results = []

    def conv_case(name, fwd, bwd, x, w, b):
        state = {}

        def forward():
            out, state["cache"] = fwd(x, w, b)
            return out

        def backward(d):
            dx, dw, db = bwd(d, state["cache"])
            return {"x": dx, "w": dw, "b": db}

        err = gradient_check(forward, backward, {"x": x, "w": w, "b": b}, rng, probes)
        results.append(CheckResult(f"gradient/{group.name}/{name}", err, 1e-4))

    x = rng.standard_normal((2, 2, 5, 5))
    f = rng.standard_normal((2, 2, S, 5, 5))
    conv_case("lift", lambda a, w, b: L.lift_conv_forward(a, w, b, group, pad), L.lift_conv_backward,
              x, rng.standard_normal((3, 2, k, k)), rng.standard_normal(3))
    conv_case("group", lambda a, w, b: L.group_conv_forward(a, w, b, group, 1, pad), L.group_conv_backward,
              f.copy(), rng.standard_normal((3, 2, S, k, k)), rng.standard_normal(3))
    conv_case("group(stride=2)", lambda a, w, b: L.group_conv_forward(a, w, b, group, 2, pad), L.group_conv_backward,
              f.copy(), rng.standard_normal((3, 2, S, k, k)), rng.standard_normal(3))
    conv_case("proj", lambda a, w, b: L.proj_conv_forward(a, w, b, group, pad), L.proj_conv_backward,
              f.copy(), rng.standard_normal((3, 2, k, k)), rng.standard_normal(3))
    conv_case("transposed", lambda a, w, b: L.group_transposed_conv_forward(a, w, b, group, 2, pad),
              L.group_transposed_conv_backward, f.copy(), rng.standard_normal((2, 3, S, k, k)), rng.standard_normal(3))

    # batch norm (train mode), parameters probed through the state object
    bn = L.GroupBatchNormState(2)
    bn.gamma, bn.beta = rng.standard_normal(2), rng.standard_normal(2)
    fb = f.copy()
    st = {}

    def bn_fwd():
        out, st["c"] = L.group_batchnorm_forward(fb, bn, "train")
        return out

    def bn_bwd(d):
        dx, dg, db = L.group_batchnorm_backward(d, st["c"])
        return {"x": dx, "gamma": dg, "beta": db}

    err = gradient_check(bn_fwd, bn_bwd, {"x": fb, "gamma": bn.gamma, "beta": bn.beta}, rng, probes)
    results.append(CheckResult(f"gradient/{group.name}/batchnorm", err, 1e-4))

    for name, fwd, bwd in (
        ("relu", L.relu_forward, L.relu_backward),
        ("maxpool", L.maxpool2d_forward, L.maxpool2d_backward),
    ):
        fa = f.copy()
        st = {}

        def forward(fwd=fwd, fa=fa, st=st):
            out, st["c"] = fwd(fa)
            return out

        def backward(d, bwd=bwd, st=st):
            return {"x": bwd(d, st["c"])}

        err = gradient_check(forward, backward, {"x": fa}, rng, probes)
        results.append(CheckResult(f"gradient/{group.name}/{name}", err, 1e-4))
    return results


def network_equivariance(model: GUNet, size: int | None = None, seed: int = 0) -> CheckResult:
    """Max deviation of ``forward(T_g x)`` from ``T_g forward(x)`` over the model's group."""
    depth = model.config.depth
    size = nearest_valid_size(size or 2**depth * 2 + 1, depth)
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((2, model.config.input_channels, size, size)).astype(model.dtype)
    base = model.forward(x, train=False)
    err = 0.0
    for g in model.group.elements:
        out = model.forward(L.apply_input_transform(g, x), train=False)
        err = max(err, float(np.abs(out.astype(np.float64) - L.apply_input_transform(g, base)).max()))
    tol = 1e-10 if model.dtype == np.float64 else 1e-4
    return CheckResult(f"equivariance/{model.group.name}/network(size={size})", err, tol)


def run_suite(group: GroupSpec, model: GUNet | None = None, table_factory=None, seed: int = 0,
              gradients: bool = True, oracle: bool = True) -> list[CheckResult]:
    results = layer_equivariance(group, seed, table_factory=table_factory)
    if oracle:
        results += oracle_agreement(group, seeds=range(seed, seed + 2))
    results += adjoint_identity(group, seed)
    if gradients:
        results += layer_gradients(group, seed)
    if model is not None:
        results.append(network_equivariance(model, seed=seed))
    return results
