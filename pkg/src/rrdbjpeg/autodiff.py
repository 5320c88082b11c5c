"""Minimal reverse-mode automatic differentiation on numpy arrays.

Only the operators the restoration networks need are provided: N-d
convolution (2D and 3D), leaky ReLU, tanh, addition, scalar scaling,
concatenation, reshape and the L1 loss.  Every forward op checks its output
for non-finite values and raises ``FloatingPointError`` immediately.

Convolutions use cross-correlation (no kernel flip) and are computed as
shifted matrix products over a flattened, padded copy of the input: one BLAS
call per kernel tap, or a single im2col product when the patch is narrow.
"""

from __future__ import annotations

import contextlib
import itertools
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "no_grad",
    "is_grad_enabled",
    "conv2d",
    "conv3d",
    "leaky_relu",
    "tanh",
    "add",
    "scale",
    "concat",
    "reshape",
    "l1_loss",
]

_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording in the current thread."""
    prev = is_grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    """Dense array with optional gradient tracking."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_consumed", "_op")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._consumed = False
        self._op = "leaf"

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self._op}, requires_grad={self.requires_grad})"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> Tensor:
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, grad=None) -> None:
        """Accumulate d(self)/d(leaf) into every gradient-tracking leaf.

        ``grad`` seeds the root with a cotangent of the root's shape; without
        it the root must be a scalar. The recorded graph is released
        afterwards; calling backward a second time on it raises ``RuntimeError``.
        """
        if grad is None and self.data.size != 1:
            raise ValueError(f"backward requires a scalar root, got shape {self.shape}")
        if grad is not None:
            grad = np.asarray(grad, dtype=self.data.dtype)
            if grad.shape != self.data.shape:
                raise ValueError(f"seed gradient shape {grad.shape} does not match root {self.shape}")
        if self._consumed:
            raise RuntimeError("graph already consumed by a previous backward()")
        if not self.requires_grad:
            raise RuntimeError("root does not require grad (built under no_grad or from constants)")

        order = _topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data) if grad is None else grad.copy()}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if node.is_leaf:
                if g is not None and node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            if node._consumed:
                raise RuntimeError("graph already consumed by a previous backward()")
            if g is not None:
                parent_grads = node._backward(g)
                for parent, pg in zip(node._parents, parent_grads):
                    if pg is None or not parent.requires_grad:
                        continue
                    key = id(parent)
                    if key in grads:
                        grads[key] = grads[key] + pg
                    else:
                        grads[key] = pg
            node._backward = None
            node._consumed = True


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
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


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Iterable[Tensor], backward, op: str) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise FloatingPointError(f"non-finite values produced by {op}")
    parents = tuple(parents)
    out = Tensor(data)
    out._op = op
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


# --------------------------------------------------------------------------
# convolution


def _tap_offsets(kernel: Sequence[int], flat_strides: Sequence[int]) -> list[tuple[tuple[int, ...], int]]:
    taps = []
    for idx in itertools.product(*(range(k) for k in kernel)):
        taps.append((idx, int(sum(i * s for i, s in zip(idx, flat_strides)))))
    return taps


def _conv_geometry(x_shape, w_shape, padding):
    nd = len(w_shape) - 2
    kernel = tuple(w_shape[2:])
    padded = tuple(s + 2 * p for s, p in zip(x_shape[2:], padding))
    full_out = tuple(sp - k + 1 for sp, k in zip(padded, kernel))
    if any(o < 1 for o in full_out):
        raise ValueError(f"kernel {kernel} does not fit padded input {padded}")
    flat_strides = [int(np.prod(padded[d + 1:])) for d in range(nd)]
    length = full_out[0] * flat_strides[0]
    total = int(np.prod(padded))
    taps = _tap_offsets(kernel, flat_strides)
    tail = max(0, max(off for _, off in taps) + length - total)
    return kernel, padded, full_out, length, total, tail, taps


def _convnd(x: Tensor, w: Tensor, b: Tensor | None, stride: Sequence[int], padding: Sequence[int], op: str) -> Tensor:
    nd = w.ndim - 2
    xd, wd = x.data, w.data
    if xd.ndim != nd + 2:
        raise ValueError(f"{op}: input must have rank {nd + 2}, got shape {xd.shape}")
    n, c = xd.shape[:2]
    f = wd.shape[0]
    if wd.shape[1] != c:
        raise ValueError(f"{op}: input has {c} channels, weight expects {wd.shape[1]}")
    if b is not None and b.shape != (f,):
        raise ValueError(f"{op}: bias shape {b.shape} does not match {f} filters")
    kernel, padded, full_out, length, total, tail, taps = _conv_geometry(xd.shape, wd.shape, padding)
    for d in range(nd):
        if (full_out[d] - 1) % stride[d] != 0:
            raise ValueError(f"{op}: output extent along spatial axis {d} is not integral for stride {stride[d]}")
    dtype = np.result_type(xd.dtype, wd.dtype)
    n_taps = len(taps)
    span = total + tail
    interior = (slice(None),) + tuple(slice(p, p + s) for p, s in zip(padding, xd.shape[2:])) + (slice(None),)

    # Channels-last, zero-padded input flattened to rows: (N * span, C).  Tap k
    # of output row q reads input row q + off_k; rows past `length` in each
    # sample are scratch and get dropped.
    flat = np.zeros((n, span, c), dtype=dtype)
    flat[:, :total].reshape((n,) + padded + (c,))[interior] = np.moveaxis(xd, 1, -1)
    rows = flat.reshape(n * span, c)
    used = n * span - max(off for _, off in taps)
    w_taps = np.ascontiguousarray(np.moveaxis(wd.reshape(f, c, n_taps), -1, 0).transpose(0, 2, 1), dtype=dtype)
    im2col = c * n_taps <= 32
    # stacking shifted output grads pays off when outputs are narrow
    stack_grad = 2 * f <= c

    def gather() -> np.ndarray:
        cols = np.empty((used, n_taps, c), dtype=dtype)
        for k, (_, off) in enumerate(taps):
            cols[:, k] = rows[off:off + used]
        return cols.reshape(used, n_taps * c)

    acc = np.zeros((n * span, f), dtype=dtype)
    if im2col:
        np.matmul(gather(), w_taps.reshape(n_taps * c, f), out=acc[:used])
    else:
        tmp = np.empty((used, f), dtype=dtype)
        for k, (_, off) in enumerate(taps):
            np.matmul(rows[off:off + used], w_taps[k], out=tmp)
            acc[:used] += tmp
    if b is not None:
        acc += b.data.astype(dtype)
    grid_shape = (n, full_out[0]) + padded[1:] + (f,)
    valid = (slice(None),) + tuple(slice(0, o, s) for o, s in zip(full_out, stride)) + (slice(None),)
    out = np.moveaxis(acc.reshape(n, span, f)[:, :length].reshape(grid_shape)[valid], -1, 1)

    def backward(g):
        g_rows = np.zeros((n, span, f), dtype=dtype)
        g_rows[:, :length].reshape(grid_shape)[valid] = np.moveaxis(g, 1, -1)
        g_rows = g_rows.reshape(n * span, f)[:used]
        need_x = x.requires_grad
        gx = gw = gb = None
        g_in = np.zeros((n * span, c), dtype=dtype) if need_x else None
        if im2col:
            gw_taps = (gather().T @ g_rows).reshape(n_taps, c, f)
            if need_x:
                z = (g_rows @ w_taps.reshape(n_taps * c, f).T).reshape(used, n_taps, c)
                for k, (_, off) in enumerate(taps):
                    g_in[off:off + used] += z[:, k]
        elif stack_grad:
            shifted = np.zeros((n * span, n_taps, f), dtype=dtype)
            for k, (_, off) in enumerate(taps):
                shifted[off:off + used, k] = g_rows
            shifted = shifted.reshape(n * span, n_taps * f)
            gw_taps = (rows.T @ shifted).reshape(c, n_taps, f).transpose(1, 0, 2)
            if need_x:
                np.matmul(shifted, w_taps.transpose(0, 2, 1).reshape(n_taps * f, c), out=g_in)
        else:
            gw_taps = np.empty((n_taps, c, f), dtype=dtype)
            tmp_x = np.empty((used, c), dtype=dtype) if need_x else None
            for k, (_, off) in enumerate(taps):
                gw_taps[k] = rows[off:off + used].T @ g_rows
                if need_x:
                    np.matmul(g_rows, w_taps[k].T, out=tmp_x)
                    g_in[off:off + used] += tmp_x
        if need_x:
            gxp = g_in.reshape(n, span, c)[:, :total].reshape((n,) + padded + (c,))
            gx = np.moveaxis(gxp[interior], -1, 1)
        if w.requires_grad:
            gw = np.moveaxis(gw_taps.transpose(0, 2, 1), 0, -1).reshape(wd.shape)
        if b is not None and b.requires_grad:
            gb = g_rows.sum(axis=0)
        return gx, gw, gb

    parents = (x, w) if b is None else (x, w, b)
    return _make(out, parents, backward, op)


def _tuple(v, nd: int) -> tuple[int, ...]:
    if isinstance(v, int):
        return (v,) * nd
    v = tuple(int(i) for i in v)
    if len(v) != nd:
        raise ValueError(f"expected {nd} values, got {v}")
    return v


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride=1, padding=0) -> Tensor:
    """2D cross-correlation: x (N,C,H,W), w (F,C,kh,kw), b (F,)."""
    if w.ndim != 4:
        raise ValueError(f"conv2d weight must be rank 4, got {w.shape}")
    return _convnd(x, w, b, _tuple(stride, 2), _tuple(padding, 2), "conv2d")


def conv3d(x: Tensor, w: Tensor, b: Tensor | None = None, stride=1, padding=0) -> Tensor:
    """3D cross-correlation: x (N,C,D,H,W), w (F,C,kd,kh,kw), b (F,)."""
    if w.ndim != 5:
        raise ValueError(f"conv3d weight must be rank 5, got {w.shape}")
    return _convnd(x, w, b, _tuple(stride, 3), _tuple(padding, 3), "conv3d")


# --------------------------------------------------------------------------
# pointwise and structural ops


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    # the kink at 0 takes the negative-side slope
    pos = x.data > 0
    out = x.data * np.where(pos, 1.0, slope).astype(x.dtype)

    def backward(g):
        return (g * np.where(pos, 1.0, slope).astype(g.dtype),)

    return _make(out, (x,), backward, "leaky_relu")


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)

    def backward(g):
        return (g * (1.0 - out * out),)

    return _make(out, (x,), backward, "tanh")


def add(x: Tensor, y: Tensor) -> Tensor:
    x, y = _as_tensor(x), _as_tensor(y)
    if x.shape != y.shape:
        raise ValueError(f"add: shape mismatch {x.shape} vs {y.shape}")

    def backward(g):
        return g, g

    return _make(x.data + y.data, (x, y), backward, "add")


def scale(x: Tensor, beta: float) -> Tensor:
    beta = float(beta)

    def backward(g):
        return (g * beta,)

    return _make(x.data * beta, (x,), backward, "scale")


def concat(xs: Sequence[Tensor], axis: int = 1) -> Tensor:
    xs = [_as_tensor(t) for t in xs]
    if not xs:
        raise ValueError("concat of an empty sequence")
    axis = axis % xs[0].ndim
    sizes = [t.shape[axis] for t in xs]
    bounds = np.cumsum([0] + sizes)
    out = np.concatenate([t.data for t in xs], axis=axis)

    def backward(g):
        parts = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(int(lo), int(hi))
            parts.append(g[tuple(sl)])
        return parts

    return _make(out, xs, backward, "concat")


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    src = x.shape
    out = x.data.reshape(shape)

    def backward(g):
        return (g.reshape(src),)

    return _make(out, (x,), backward, "reshape")


def l1_loss(pred: Tensor, target) -> Tensor:
    """Mean absolute error; the gradient uses sign(0) = 0."""
    target = target.data if isinstance(target, Tensor) else np.asarray(target)
    if pred.shape != target.shape:
        raise ValueError(f"l1_loss: shape mismatch {pred.shape} vs {target.shape}")
    diff = pred.data - target
    count = diff.size
    out = np.asarray(np.abs(diff).mean(), dtype=pred.dtype)

    def backward(g):
        return (np.sign(diff) * (g / count),)

    return _make(out, (pred,), backward, "l1_loss")
