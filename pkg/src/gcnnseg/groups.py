"""Discrete roto-reflection groups p1, p4 and p4m.

Only the stabilizer part of a group element is represented explicitly; the
translation part lives in array offsets inside the convolutions.

An element ``(m, r)`` stands for ``M**m @ R**r``: rotate by ``r`` quarter
turns counter-clockwise, then mirror the horizontal axis if ``m == 1``.
Acting on array indices of a square ``n x n`` grid (rows pointing down):

* ``R``: ``(i, j) -> (n - 1 - j, i)`` (what ``np.rot90`` does to positions)
* ``M``: ``(i, j) -> (i, n - 1 - j)`` (what ``np.fliplr`` does to positions)

Orientation channels are ordered identity first, then the remaining
rotations, then (p4m only) the mirrored elements ``(1, 0) .. (1, 3)``.
"""
from __future__ import annotations

import functools
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np


class InvalidElementError(ValueError):
    """A group element that does not belong to the requested group."""


class GroupSpec(NamedTuple):
    name: str
    stabilizer_size: int

    @property
    def elements(self) -> list["GroupElement"]:
        return stabilizer(self)

    def __str__(self) -> str:
        return self.name


P1 = GroupSpec("p1", 1)
P4 = GroupSpec("p4", 4)
P4M = GroupSpec("p4m", 8)
GROUPS = {g.name: g for g in (P1, P4, P4M)}


def get_group(name: str | GroupSpec) -> GroupSpec:
    if isinstance(name, GroupSpec):
        return name
    try:
        return GROUPS[name]
    except KeyError:
        raise ValueError(f"unknown group {name!r}; expected one of {sorted(GROUPS)}") from None


class GroupElement(NamedTuple):
    mirror: int
    rotation: int

    @property
    def index(self) -> int:
        """Position of the element on the orientation axis."""
        return 4 * self.mirror + self.rotation


IDENTITY = GroupElement(0, 0)


def stabilizer(group: GroupSpec) -> list[GroupElement]:
    if group.stabilizer_size == 1:
        return [IDENTITY]
    mirrors = (0, 1) if group.stabilizer_size == 8 else (0,)
    return [GroupElement(m, r) for m in mirrors for r in range(4)]


def element_at(index: int, group: GroupSpec) -> GroupElement:
    return stabilizer(group)[index]


def check_element(g: GroupElement, group: GroupSpec) -> GroupElement:
    g = GroupElement(*g)
    if g not in stabilizer(group):
        raise InvalidElementError(f"{tuple(g)} is not an element of {group.name}")
    return g


def compose(g1: GroupElement, g2: GroupElement, group: GroupSpec = P4M) -> GroupElement:
    """Group product ``g1 * g2`` (apply ``g2`` first)."""
    m1, r1 = check_element(g1, group)
    m2, r2 = check_element(g2, group)
    sign = -1 if m2 else 1
    return GroupElement((m1 + m2) % 2, (sign * r1 + r2) % 4)


def inverse(g: GroupElement, group: GroupSpec = P4M) -> GroupElement:
    m, r = check_element(g, group)
    if m:
        return GroupElement(1, r)
    return GroupElement(0, (-r) % 4)


def act_on_coords(g: GroupElement, p: tuple[int, int], extent: tuple[int, int]) -> tuple[int, int]:
    """Image of array position ``p`` under ``g`` acting about the array centre."""
    m, r = g
    h, w = extent
    if r % 2 and h != w:
        raise ValueError(f"quarter turns need a square extent, got {extent}")
    i, j = p
    if not (0 <= i < h and 0 <= j < w):
        raise ValueError(f"position {p} outside extent {extent}")
    if r >= 2:
        i, j = h - 1 - i, w - 1 - j
    if r % 2:
        i, j = w - 1 - j, i
    if m:
        j = w - 1 - j
    return i, j


def transform_planar(a: np.ndarray, g: GroupElement) -> np.ndarray:
    """Roto-reflect the last two axes of ``a`` by ``g``: ``out[p] = a[g^-1 p]``."""
    m, r = g
    out = np.rot90(a, r, axes=(-2, -1))
    if m:
        out = out[..., ::-1]
    return np.ascontiguousarray(out)


def transform_planar_filter(psi: np.ndarray, g: GroupElement) -> np.ndarray:
    if psi.shape[-1] % 2 == 0 or psi.shape[-1] != psi.shape[-2]:
        raise ValueError(f"filters must be square with odd size, got {psi.shape[-2:]}")
    return transform_planar(psi, g)


@dataclass(frozen=True, eq=False)
class IndexTable:
    """Where each tap of a transformed filter is read from.

    ``entries[s_out, s_in, i, j] = (s_in', i', j')``: for output orientation
    ``s_out`` the filter value at ``(s_in, i, j)`` is the stored value at
    ``(s_in', i', j')``.
    """

    group: GroupSpec
    kernel_size: int
    entries: np.ndarray  # int64 [S, S, k, k, 3]

    @functools.cached_property
    def flat(self) -> np.ndarray:
        """Flat gather indices into a ``[S, k, k]`` block, shape ``[S_out, S*k*k]``."""
        s, k = self.group.stabilizer_size, self.kernel_size
        e = self.entries.reshape(s, -1, 3)
        return (e[..., 0] * k + e[..., 1]) * k + e[..., 2]

    @functools.cached_property
    def spatial_flat(self) -> np.ndarray:
        """Flat gather indices into a planar ``[k, k]`` filter, shape ``[S_out, k*k]``."""
        k = self.kernel_size
        e = self.entries[:, 0].reshape(self.group.stabilizer_size, -1, 3)
        return e[..., 1] * k + e[..., 2]


def build_index_table(group: GroupSpec, k: int) -> IndexTable:
    if k % 2 == 0 or k < 1:
        raise ValueError(f"kernel size must be odd and positive, got {k}")
    elems = stabilizer(group)
    n = len(elems)
    entries = np.empty((n, n, k, k, 3), dtype=np.int64)
    for so, g_out in enumerate(elems):
        g_inv = inverse(g_out, group)
        for si, g_in in enumerate(elems):
            src = elems.index(compose(g_inv, g_in, group))
            for i in range(k):
                for j in range(k):
                    entries[so, si, i, j] = (src, *act_on_coords(g_inv, (i, j), (k, k)))
    return IndexTable(group, k, entries)


@functools.lru_cache(maxsize=None)
def index_table(group: GroupSpec, k: int) -> IndexTable:
    """Shared, cached ``build_index_table``."""
    return build_index_table(group, k)


def action_matrix(g: GroupElement) -> np.ndarray:
    """Integer 2x2 matrix ``M**m R**r`` acting on centred (row, col) vectors."""
    rot = np.array([[0, -1], [1, 0]])
    mir = np.array([[1, 0], [0, -1]])
    out = np.linalg.matrix_power(rot, g.rotation)
    if g.mirror:
        out = mir @ out
    return out
