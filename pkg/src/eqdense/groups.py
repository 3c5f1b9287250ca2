"""Point groups C4 (rotations, for p4) and D4 (roto-reflections, for p4m).

An element is stored as ``(mirror, rot)`` and acts on the plane as "flip
horizontally if ``mirror``, then rotate ``rot`` quarter turns
counter-clockwise", i.e. by the matrix ``R**rot @ M**mirror``.  Orientation
axes are indexed ``4 * mirror + rot``, giving the order
``[e, r, r2, r3, m, rm, r2m, r3m]`` for D4 and the first four for C4.
Translations are carried implicitly by convolution.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from eqdense.errors import ContractError, UnsupportedSizeError
from eqdense.tensor import Tensor, transform_plane

GROUP_ALIASES = {
    "trivial": "trivial",
    "z2": "trivial",
    "c4": "C4",
    "p4": "C4",
    "d4": "D4",
    "p4m": "D4",
}

GROUP_SIZES = {"trivial": 1, "C4": 4, "D4": 8}

_R = np.array([[0, -1], [1, 0]])
_M = np.array([[-1, 0], [0, 1]])


def canonical_kind(kind: str) -> str:
    try:
        return GROUP_ALIASES[kind.lower()]
    except (KeyError, AttributeError):
        raise ContractError(f"unknown group kind {kind!r}") from None


@dataclass(frozen=True)
class StabilizerElement:
    mirror: bool
    rot: int
    group_kind: str = "D4"

    def __post_init__(self):
        if not 0 <= self.rot <= 3:
            raise ContractError(f"rot must be in 0..3, got {self.rot}")
        if self.group_kind == "C4" and self.mirror:
            raise ContractError("C4 has no reflections")
        if self.group_kind == "trivial" and (self.mirror or self.rot):
            raise ContractError("trivial group has only the identity")

    @property
    def index(self) -> int:
        return 4 * int(self.mirror) + self.rot

    @property
    def matrix(self) -> np.ndarray:
        """Signed 2x2 permutation matrix acting on (x, y) coordinates."""
        return np.linalg.matrix_power(_R, self.rot) @ np.linalg.matrix_power(_M, int(self.mirror))

    def __matmul__(self, other: "StabilizerElement") -> "StabilizerElement":
        return compose(self, other)

    def __repr__(self) -> str:
        parts = ("r" if self.rot == 1 else f"r{self.rot}") if self.rot else ""
        parts += "m" if self.mirror else ""
        return f"<{self.group_kind} {parts or 'e'}>"


def compose(a: StabilizerElement, b: StabilizerElement) -> StabilizerElement:
    """``a o b``: apply ``b`` first, then ``a``."""
    if a.group_kind != b.group_kind:
        raise ContractError(f"cannot compose {a.group_kind} with {b.group_kind}")
    sign = -1 if a.mirror else 1
    return StabilizerElement(a.mirror != b.mirror, (a.rot + sign * b.rot) % 4, a.group_kind)


def inverse(g: StabilizerElement) -> StabilizerElement:
    rot = g.rot if g.mirror else (-g.rot) % 4
    return StabilizerElement(g.mirror, rot, g.group_kind)


def identity(kind: str = "D4") -> StabilizerElement:
    return StabilizerElement(False, 0, canonical_kind(kind))


def elements(kind: str) -> list[StabilizerElement]:
    kind = canonical_kind(kind)
    if kind == "trivial":
        return [StabilizerElement(False, 0, kind)]
    mirrors = (False, True) if kind == "D4" else (False,)
    return [StabilizerElement(m, r, kind) for m in mirrors for r in range(4)]


@dataclass(frozen=True, eq=False)
class GroupTables:
    kind: str
    elements: tuple
    compose: np.ndarray  # compose[a, b] = index of a o b
    inverse: np.ndarray

    @property
    def size(self) -> int:
        return len(self.elements)

    def __getitem__(self, index: int) -> StabilizerElement:
        return self.elements[index]


@lru_cache(maxsize=None)
def get_tables(kind: str) -> GroupTables:
    kind = canonical_kind(kind)
    els = elements(kind)
    pos = {g: i for i, g in enumerate(els)}
    table = np.array([[pos[compose(a, b)] for b in els] for a in els], dtype=np.int64)
    inv = np.array([pos[inverse(g)] for g in els], dtype=np.int64)
    table.flags.writeable = False
    inv.flags.writeable = False
    return GroupTables(kind, tuple(els), table, inv)


def act_on_kernel(g: StabilizerElement, kernel):
    """Return ``(g . psi)(y) = psi(g^-1 y)`` about the kernel centre."""
    k1, k2 = kernel.shape[-2:] if isinstance(kernel, Tensor) else np.shape(kernel)[-2:]
    if k1 != k2 or k1 % 2 == 0:
        raise UnsupportedSizeError(f"kernel must be square with odd size, got {k1}x{k2}")
    return transform_plane(kernel, g.rot, g.mirror)


def act_on_orientation_axis(g: StabilizerElement, tables: GroupTables) -> np.ndarray:
    """Permutation ``pi`` with ``pi[h] = index(g o h)``.

    When the input is transformed by ``g``, the feature in orientation slot
    ``h`` moves to slot ``pi[h]``.
    """
    if g.group_kind != tables.kind:
        raise ContractError(f"element of {g.group_kind} used with {tables.kind} tables")
    return tables.compose[g.index].copy()
