"""Dense tensors with reverse-mode differentiation.

Only the operations needed by the equivariant DenseNet are provided.  Every
op is a pure function: it builds a new :class:`Tensor` and, when any input
requires gradients, records a node holding the saved activations and a
closure mapping the output gradient to input gradients.

Convolution is cross-correlation throughout.
"""

from __future__ import annotations

from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from eqdense import _kernels
from eqdense.errors import ContractError, DimensionError, ValidationError

BCE_EPS = 1e-7

# Upper bound on the size of one lowered patch matrix; larger batches are
# processed in slices so memory stays flat.
_COLS_BUDGET_BYTES = 64 * 2**20

_FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))


class Tensor:
    """An immutable n-d array, optionally attached to a differentiation tape."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float32)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __getitem__(self, index) -> "Tensor":
        return getitem(self, index)

    def __add__(self, other) -> "Tensor":
        return add(self, other)

    def __mul__(self, other) -> "Tensor":
        return mul(self, other)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def _record(out: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    t = Tensor(out)
    if any(p.requires_grad for p in parents):
        t.requires_grad = True
        t._parents = tuple(parents)
        t._backward = backward
    return t


# ---------------------------------------------------------------------------
# tape traversal


def tape(loss: Tensor) -> list[Tensor]:
    """Return the recorded nodes reachable from ``loss`` in topological order."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, params: Mapping[str, Tensor] | None = None) -> dict[str, np.ndarray]:
    """Backpropagate from a scalar ``loss``.

    Leaf tensors get their ``.grad`` set.  When ``params`` is given the
    result maps each name to its gradient, with zeros for parameters the loss
    does not depend on.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg
    if params is None:
        return {}
    return {
        name: (t.grad if t.grad is not None else np.zeros_like(t.data))
        for name, t in params.items()
    }


# ---------------------------------------------------------------------------
# structural ops


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    in_shape = x.shape
    return _record(x.data.reshape(shape), (x,), lambda g: (g.reshape(in_shape),))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    inv = np.argsort(axes)
    return _record(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),))


def getitem(x: Tensor, index) -> Tensor:
    """Basic (slice) indexing; the gradient scatters back into zeros."""
    out = np.array(x.data[index], copy=True)

    def bwd(g):
        dx = np.zeros_like(x.data)
        dx[index] += g
        return (dx,)

    return _record(out, (x,), bwd)


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = list(tensors)
    sizes = [t.shape[axis] for t in tensors]
    for t in tensors[1:]:
        if t.ndim != tensors[0].ndim or t.dtype != tensors[0].dtype:
            raise DimensionError("concat needs tensors of equal rank and dtype")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    splits = np.cumsum(sizes)[:-1]
    return _record(out, tensors, lambda g: tuple(np.split(g, splits, axis=axis)))


def gather(x: Tensor, index: np.ndarray) -> Tensor:
    """``x.flat[index]``; the gradient is a scatter-add back onto ``x``."""
    flat = x.data.reshape(-1)
    out = flat[index]

    def bwd(g):
        dx = np.bincount(index.reshape(-1), weights=g.reshape(-1), minlength=flat.size)
        return (dx.astype(x.dtype, copy=False).reshape(x.shape),)

    return _record(out, (x,), bwd)


def crop_center(x: Tensor, margin: int) -> Tensor:
    """Drop ``margin`` pixels from every side of the last two axes."""
    if margin == 0:
        return x
    H, W = x.shape[-2:]
    if 2 * margin >= min(H, W):
        raise DimensionError(f"cannot crop {margin} pixels per side from {H}x{W}")
    return getitem(x, (Ellipsis, slice(margin, H - margin), slice(margin, W - margin)))


# ---------------------------------------------------------------------------
# arithmetic


def _check_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ")


def add(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        c = np.asarray(b, dtype=a.dtype)
        return _record(a.data + c, (a,), lambda g: (g,))
    _check_same_shape(a, b, "add")
    return _record(a.data + b.data, (a, b), lambda g: (g, g))


def mul(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        c = np.asarray(b, dtype=a.dtype)
        return _record(a.data * c, (a,), lambda g: (g * c,))
    _check_same_shape(a, b, "mul")
    return _record(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def sum(x: Tensor) -> Tensor:  # noqa: A001
    return _record(np.asarray(x.data.sum(), dtype=x.dtype), (x,),
                   lambda g: (np.broadcast_to(g, x.shape).copy(),))


def mean(x: Tensor, axis: int | None = None) -> Tensor:
    if axis is None:
        n = x.data.size
        out = np.asarray(x.data.mean(), dtype=x.dtype)
        return _record(out, (x,), lambda g: (np.full(x.shape, g / n, dtype=x.dtype),))
    n = x.shape[axis]
    out = x.data.mean(axis=axis)

    def bwd(g):
        return (np.broadcast_to(np.expand_dims(g / n, axis), x.shape).copy(),)

    return _record(out, (x,), bwd)


def add_channel_bias(x: Tensor, bias: Tensor) -> Tensor:
    """``x[N,C,...] + bias[C]``."""
    shape = (1, -1) + (1,) * (x.ndim - 2)
    axes = tuple(i for i in range(x.ndim) if i != 1)
    return _record(x.data + bias.data.reshape(shape), (x, bias),
                   lambda g: (g, g.sum(axis=axes)))


# ---------------------------------------------------------------------------
# activations and loss


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _record(np.maximum(x.data, x.dtype.type(0)), (x,), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    z = x.data
    e = np.exp(-np.abs(z))
    out = np.where(z >= 0, 1 / (1 + e), e / (1 + e)).astype(x.dtype)
    return _record(out, (x,), lambda g: (g * out * (1 - out),))


def elementwise(x: Tensor, kind: str) -> Tensor:
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ContractError(f"unknown elementwise op {kind!r}")


def bce_loss(prob: Tensor, label, eps: float = BCE_EPS) -> Tensor:
    """Mean binary cross-entropy; probabilities are clamped to ``[eps, 1-eps]``."""
    y = np.asarray(label.data if isinstance(label, Tensor) else label)
    if not np.isin(y, (0, 1)).all():
        raise ValidationError("labels must be 0 or 1")
    y = np.broadcast_to(y.astype(prob.dtype), prob.shape)
    p = np.clip(prob.data, eps, 1 - eps)
    n = p.size
    loss = -(y * np.log(p) + (1 - y) * np.log1p(-p)).mean()
    inside = (prob.data >= eps) & (prob.data <= 1 - eps)

    def bwd(g):
        d = (-(y / p) + (1 - y) / (1 - p)) / n
        return ((g * d * inside).astype(prob.dtype),)

    return _record(np.asarray(loss, dtype=prob.dtype), (prob,), bwd)


# ---------------------------------------------------------------------------
# convolution and pooling


def _batch_slices(n: int, per_sample_bytes: int) -> Iterable[slice]:
    step = max(1, _COLS_BUDGET_BYTES // max(per_sample_bytes, 1))
    for start in range(0, n, step):
        yield slice(start, min(n, start + step))


def _lower(x: np.ndarray, kh: int, kw: int) -> np.ndarray:
    if kh == 1 and kw == 1:
        return x.transpose(1, 0, 2, 3).reshape(x.shape[1], -1)
    return _kernels.im2col(x, kh, kw)


def _lift(cols: np.ndarray, shape: tuple, kh: int, kw: int) -> np.ndarray:
    if kh == 1 and kw == 1:
        N, C, H, W = shape
        return cols.reshape(C, N, H, W).transpose(1, 0, 2, 3)
    return _kernels.col2im(cols, shape, kh, kw)


def conv2d_valid(x: Tensor, w: Tensor) -> Tensor:
    """Valid cross-correlation ``out[n,o,i,j] = sum_{c,u,v} x[n,c,i+u,j+v] w[o,c,u,v]``."""
    if x.ndim != 4 or w.ndim != 4:
        raise DimensionError(f"conv2d_valid needs 4-d input and kernel, got {x.shape}, {w.shape}")
    N, C, H, W = x.shape
    O, Ck, kh, kw = w.shape
    if C != Ck:
        raise DimensionError(f"input has {C} channels, kernel expects {Ck}")
    if kh > H or kw > W:
        raise DimensionError(f"kernel {kh}x{kw} larger than input {H}x{W}")
    if x.dtype != w.dtype:
        raise DimensionError(f"dtype mismatch: {x.dtype} vs {w.dtype}")
    Ho, Wo = H - kh + 1, W - kw + 1
    xd = np.ascontiguousarray(x.data)
    w2 = w.data.reshape(O, -1)
    per_sample = C * kh * kw * Ho * Wo * xd.itemsize
    out = np.empty((N, O, Ho, Wo), dtype=x.dtype)
    for s in _batch_slices(N, per_sample):
        n = s.stop - s.start
        out[s] = (w2 @ _lower(xd[s], kh, kw)).reshape(O, n, Ho, Wo).transpose(1, 0, 2, 3)

    def bwd(g):
        dw = np.zeros_like(w2) if w.requires_grad else None
        dx = np.empty_like(xd) if x.requires_grad else None
        for s in _batch_slices(N, per_sample):
            n = s.stop - s.start
            g2 = g[s].transpose(1, 0, 2, 3).reshape(O, -1)
            if dw is not None:
                dw += g2 @ _lower(xd[s], kh, kw).T
            if dx is not None:
                dx[s] = _lift(w2.T @ g2, (n, C, H, W), kh, kw)
        return dx, (dw.reshape(w.shape) if dw is not None else None)

    return _record(out, (x, w), bwd)


def avg_pool2(x: Tensor) -> Tensor:
    """2x2 stride-2 mean over the last two axes; odd trailing rows/columns are dropped."""
    H, W = x.shape[-2:]
    if H < 2 or W < 2:
        raise DimensionError(f"avg_pool2 needs spatial size >= 2, got {H}x{W}")
    Ho, Wo = H // 2, W // 2
    lead = x.shape[:-2]
    core = x.data[..., : 2 * Ho, : 2 * Wo].reshape(*lead, Ho, 2, Wo, 2)
    out = core.mean(axis=(-3, -1)).astype(x.dtype, copy=False)

    def bwd(g):
        dx = np.zeros_like(x.data)
        up = np.broadcast_to((g / 4)[..., :, None, :, None], (*lead, Ho, 2, Wo, 2))
        dx[..., : 2 * Ho, : 2 * Wo] = up.reshape(*lead, 2 * Ho, 2 * Wo)
        return (dx,)

    return _record(out, (x,), bwd)


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float,
               mean_var: tuple[np.ndarray, np.ndarray] | None = None):
    """Per-channel normalisation over every axis except axis 1.

    With ``mean_var=None`` batch moments are used and returned alongside the
    output as ``(out, mean, biased_var)``; otherwise the given moments are
    treated as constants.
    """
    C = x.shape[1]
    axes = tuple(i for i in range(x.ndim) if i != 1)
    bshape = (1, C) + (1,) * (x.ndim - 2)
    xd = x.data
    if mean_var is None:
        mu = xd.mean(axis=axes)
        var = xd.var(axis=axes)
    else:
        mu, var = (np.asarray(a, dtype=x.dtype) for a in mean_var)
    inv = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = (xd - mu.reshape(bshape)) * inv.reshape(bshape)
    out = xhat * gamma.data.reshape(bshape) + beta.data.reshape(bshape)
    m = xd.size // C
    batch_stats = mean_var is None

    def bwd(g):
        dgamma = (g * xhat).sum(axis=axes)
        dbeta = g.sum(axis=axes)
        dxhat = g * gamma.data.reshape(bshape)
        if batch_stats:
            dx = (inv.reshape(bshape) / m) * (
                m * dxhat
                - dxhat.sum(axis=axes).reshape(bshape)
                - xhat * (dxhat * xhat).sum(axis=axes).reshape(bshape)
            )
        else:
            dx = dxhat * inv.reshape(bshape)
        return dx.astype(x.dtype, copy=False), dgamma, dbeta

    return _record(out.astype(x.dtype, copy=False), (x, gamma, beta), bwd), mu, var


# ---------------------------------------------------------------------------
# plane transforms


def _transform_array(a: np.ndarray, rot: int, mirror: bool) -> np.ndarray:
    if mirror:
        a = a[..., ::-1]
    return np.ascontiguousarray(np.rot90(a, rot % 4, axes=(-2, -1)))


def _inverse_transform_array(a: np.ndarray, rot: int, mirror: bool) -> np.ndarray:
    a = np.rot90(a, -(rot % 4), axes=(-2, -1))
    if mirror:
        a = a[..., ::-1]
    return np.ascontiguousarray(a)


def transform_plane(x, rot: int = 0, mirror: bool = False):
    """Flip horizontally (if ``mirror``) and then rotate ``rot`` quarter turns
    counter-clockwise, acting on the last two axes.

    Accepts a numpy array (returns an array) or a :class:`Tensor` (returns a
    differentiable Tensor).
    """
    if isinstance(x, Tensor):
        out = _transform_array(x.data, rot, mirror)
        return _record(out, (x,), lambda g: (_inverse_transform_array(g, rot, mirror),))
    return _transform_array(np.asarray(x), rot, mirror)
