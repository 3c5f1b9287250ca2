"""Group-equivariant layers: lifting conv, group conv, group batch norm, group pooling.

Feature maps on a group carry an explicit orientation axis, ``[N, C, S, H, W]``.
Both convolutions lower the sum over group elements to one planar
convolution with an expanded filter bank, so the forward and gradient paths
reuse :func:`eqdense.tensor.conv2d_valid`.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from eqdense import tensor as T
from eqdense.errors import ContractError, DimensionError, UninitializedStateError, UnsupportedSizeError
from eqdense.groups import (
    GROUP_SIZES,
    StabilizerElement,
    act_on_orientation_axis,
    canonical_kind,
    get_tables,
)
from eqdense.tensor import Tensor, transform_plane

BN_EPS = 1e-5
BN_MOMENTUM = 0.9


@dataclass
class GFeatureMap:
    tensor: Tensor
    group_kind: str

    def __post_init__(self):
        self.group_kind = canonical_kind(self.group_kind)
        if self.tensor.ndim != 5:
            raise DimensionError(f"feature map must be [N,C,S,H,W], got {self.tensor.shape}")
        if self.tensor.shape[2] != GROUP_SIZES[self.group_kind]:
            raise DimensionError(
                f"orientation axis {self.tensor.shape[2]} does not match {self.group_kind}"
            )

    @property
    def shape(self) -> tuple:
        return self.tensor.shape

    @property
    def channels(self) -> int:
        return self.tensor.shape[1]

    def with_tensor(self, t: Tensor) -> "GFeatureMap":
        return GFeatureMap(t, self.group_kind)


@dataclass
class GFilterBank:
    """Canonical weights ``[C_out, C_in, S_in, k, k]`` for a convolution into ``group_kind``."""

    weights: Tensor
    group_kind: str

    def __post_init__(self):
        self.group_kind = canonical_kind(self.group_kind)
        if self.weights.ndim != 5:
            raise DimensionError(f"filter bank must be 5-d, got {self.weights.shape}")
        s_in = self.weights.shape[2]
        if s_in not in (1, GROUP_SIZES[self.group_kind]):
            raise DimensionError(f"S_in={s_in} incompatible with {self.group_kind}")

    @property
    def s_in(self) -> int:
        return self.weights.shape[2]

    @property
    def s_out(self) -> int:
        return GROUP_SIZES[self.group_kind]


@lru_cache(maxsize=256)
def expansion_index(c_out: int, c_in: int, s_in: int, kind: str, k: int) -> np.ndarray:
    """Flat gather index from canonical weights to the expanded planar bank."""
    if k % 2 == 0:
        raise UnsupportedSizeError(f"kernel size {k} is even; only odd sizes rotate exactly")
    tables = get_tables(kind)
    S = tables.size
    kk = k * k
    grid = np.arange(kk).reshape(k, k)
    spatial = np.stack([transform_plane(grid, g.rot, g.mirror) for g in tables.elements])
    if s_in == 1:
        src_slot = np.zeros((S, 1), dtype=np.int64)
    else:
        # output orientation s reads input slot s^-1 o t
        src_slot = tables.compose[tables.inverse]
    o = np.arange(c_out)[:, None, None, None, None, None]
    c = np.arange(c_in)[None, None, :, None, None, None]
    slot = src_slot[None, :, None, :, None, None]
    pos = spatial[None, :, None, None, :, :]
    idx = ((o * c_in + c) * s_in + slot) * kk + pos
    idx = np.ascontiguousarray(idx.reshape(c_out * S, c_in * s_in, k, k))
    idx.flags.writeable = False
    return idx


def expand_filters(bank: GFilterBank, tables=None) -> Tensor:
    """Expanded bank ``[C_out*S_out, C_in*S_in, k, k]`` whose block ``(o*S+s, c*S_in+t)`` is
    ``act_on_kernel(s, w[o, c, s^-1 o t])``."""
    c_out, c_in, s_in, k1, k2 = bank.weights.shape
    kind = tables.kind if tables is not None else bank.group_kind
    if k1 != k2 or k1 % 2 == 0:
        raise UnsupportedSizeError(f"kernel must be square with odd size, got {k1}x{k2}")
    return T.gather(bank.weights, expansion_index(c_out, c_in, s_in, kind, k1))


def lift_conv(x: Tensor, bank: GFilterBank) -> GFeatureMap:
    """Planar input ``[N,C,H,W]`` to a feature map on the group."""
    if x.ndim != 4:
        raise ContractError(f"lift_conv expects a planar [N,C,H,W] input, got {x.shape}")
    if bank.s_in != 1:
        raise ContractError("lift_conv needs a bank with S_in = 1")
    out = T.conv2d_valid(x, expand_filters(bank))
    N, _, H, W = out.shape
    return GFeatureMap(T.reshape(out, (N, bank.weights.shape[0], bank.s_out, H, W)), bank.group_kind)


def gconv(fm: GFeatureMap, bank: GFilterBank) -> GFeatureMap:
    """Group-to-group convolution."""
    N, C, S, H, W = fm.shape
    if fm.group_kind != bank.group_kind or bank.s_in != S:
        raise ContractError(
            f"input on {fm.group_kind} (S={S}) does not match bank on {bank.group_kind} "
            f"(S_in={bank.s_in})"
        )
    planar = T.reshape(fm.tensor, (N, C * S, H, W))
    out = T.conv2d_valid(planar, expand_filters(bank))
    _, _, Ho, Wo = out.shape
    return GFeatureMap(T.reshape(out, (N, bank.weights.shape[0], bank.s_out, Ho, Wo)), fm.group_kind)


@dataclass
class BatchNormState:
    running_mean: np.ndarray | None = None
    running_var: np.ndarray | None = None
    momentum: float = BN_MOMENTUM
    eps: float = BN_EPS
    steps: int = field(default=0)

    def update(self, mean: np.ndarray, var: np.ndarray, count: int) -> None:
        unbiased = var * count / max(count - 1, 1)
        if self.running_mean is None:
            self.running_mean = mean.astype(np.float64)
            self.running_var = unbiased.astype(np.float64)
        else:
            m = self.momentum
            self.running_mean = m * self.running_mean + (1 - m) * mean
            self.running_var = m * self.running_var + (1 - m) * unbiased
        self.steps += 1


def group_batchnorm(fm, gamma: Tensor, beta: Tensor, state: BatchNormState,
                    mode: str = "train", update_state: bool = True):
    """Batch norm with one moment pair per group channel, pooled over (N, S, H, W).

    Accepts a :class:`GFeatureMap` or a planar ``[N,C,H,W]`` tensor.
    """
    t = fm.tensor if isinstance(fm, GFeatureMap) else fm
    C = t.shape[1]
    if gamma.shape != (C,) or beta.shape != (C,):
        raise DimensionError(f"gamma/beta must have shape ({C},)")
    if mode == "train":
        out, mu, var = T.batch_norm(t, gamma, beta, state.eps)
        if update_state:
            state.update(mu, var, t.data.size // C)
    elif mode == "eval":
        if state.running_mean is None:
            raise UninitializedStateError("batch norm evaluated before any training step")
        out, _, _ = T.batch_norm(t, gamma, beta, state.eps, (state.running_mean, state.running_var))
    else:
        raise ContractError(f"mode must be 'train' or 'eval', got {mode!r}")
    return fm.with_tensor(out) if isinstance(fm, GFeatureMap) else out


def group_pool(fm: GFeatureMap) -> Tensor:
    """Average over the orientation axis."""
    if fm.shape[2] < 2:
        raise ContractError("group_pool needs an orientation axis with S > 1")
    return T.mean(fm.tensor, axis=2)


def transform_feature_map(x, g: StabilizerElement):
    """Apply the induced action of ``g`` to an array or Tensor.

    4-d inputs ``[N,C,H,W]`` (and orientation axes of size 1) are only
    transformed in the plane; for ``[N,C,S,H,W]`` slot ``h`` moves to slot
    ``g o h`` and every slot is transformed in the plane.
    """
    is_tensor = isinstance(x, Tensor)
    shape = x.shape
    if len(shape) == 5 and shape[2] > 1:
        tables = get_tables({4: "C4", 8: "D4"}[shape[2]])
        if g.group_kind != tables.kind:
            g = StabilizerElement(g.mirror, g.rot, tables.kind)
        perm = act_on_orientation_axis(g, tables)
        src = np.argsort(perm)
        if is_tensor:
            x = T.getitem(x, (slice(None), slice(None), src))
        else:
            x = x[:, :, src]
    return transform_plane(x, g.rot, g.mirror)
