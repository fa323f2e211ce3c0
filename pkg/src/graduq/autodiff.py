"""Reverse-mode automatic differentiation over dense float64 arrays.

A Tensor wraps a C-contiguous float64 ndarray. Operations build an
immutable DAG: each result keeps references to its parents and a closure
that maps the output gradient to parent gradients. The DAG reachable from
an output tensor is the computation record; backward() replays it as often
as needed and never mutates it, so repeated traversals are bit-identical
and distinct records can be built and differentiated concurrently.

Conventions fixed here: ReLU subgradient at 0 is 0; max-pooling ties route
the gradient to the first position in row-major window order; convolution
is valid-padding, stride-1 cross-correlation. Only bias addition
broadcasts; everything else requires exact shapes.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import DomainError, ShapeError

__all__ = [
    "Tensor",
    "add",
    "add_chanbias",
    "add_rowvec",
    "backward",
    "conv2d",
    "grad_check",
    "log_softmax",
    "matmul",
    "maxpool2d",
    "mul",
    "pick_rows",
    "relu",
    "reshape",
    "scale",
    "sum_all",
]


class Tensor:
    """Node in the computation DAG; leaf if it has no parents."""

    __slots__ = ("data", "parents", "vjp")

    def __init__(
        self,
        data,
        parents: tuple["Tensor", ...] = (),
        vjp: Callable[[np.ndarray], tuple] | None = None,
    ):
        arr = np.ascontiguousarray(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise DomainError("tensor holds non-finite entries")
        self.data = arr
        self.parents = parents
        self.vjp = vjp

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def is_leaf(self) -> bool:
        return self.vjp is None

    def __repr__(self) -> str:
        kind = "leaf" if self.is_leaf else "op"
        return f"Tensor({kind}, shape={self.data.shape})"


def _topo_order(out: Tensor) -> list[Tensor]:
    """Parents-before-children order, deterministic by construction."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(out, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in reversed(node.parents):
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(out: Tensor, wrt: Sequence[Tensor]) -> list[np.ndarray]:
    """Gradients of the scalar `out` with respect to each tensor in `wrt`.

    The record is immutable: calling backward twice on the same output
    produces bit-identical gradients. Tensors in `wrt` that the output does
    not depend on get zero gradients.
    """
    if out.data.size != 1:
        raise DomainError(f"backward seed must be scalar, got shape {out.data.shape}")
    grads: dict[int, np.ndarray] = {id(out): np.ones_like(out.data)}
    for node in reversed(_topo_order(out)):
        g = grads.get(id(node))
        if g is None or node.vjp is None:
            continue
        parent_grads = node.vjp(g)
        for parent, pg in zip(node.parents, parent_grads):
            acc = grads.get(id(parent))
            grads[id(parent)] = pg if acc is None else acc + pg
    return [np.array(grads[id(t)]) if id(t) in grads else np.zeros_like(t.data) for t in wrt]


# ---------------------------------------------------------------------------
# primitive operations
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.data.shape} x {b.data.shape}")
    ad, bd = a.data, b.data

    def vjp(g):
        return g @ bd.T, ad.T @ g

    return Tensor(ad @ bd, (a, b), vjp)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ShapeError(f"add: shapes differ {a.data.shape} vs {b.data.shape}")
    return Tensor(a.data + b.data, (a, b), lambda g: (g, g))


def add_rowvec(a: Tensor, v: Tensor) -> Tensor:
    """Bias addition for dense layers: (m, n) + (n,) broadcast over rows."""
    if a.data.ndim != 2 or v.data.shape != (a.data.shape[1],):
        raise ShapeError(f"add_rowvec: shapes {a.data.shape} + {v.data.shape}")
    return Tensor(a.data + v.data[None, :], (a, v), lambda g: (g, g.sum(axis=0)))


def add_chanbias(x: Tensor, b: Tensor) -> Tensor:
    """Bias addition for conv layers: (c, h, w) + (c,) broadcast per channel."""
    if x.data.ndim != 3 or b.data.shape != (x.data.shape[0],):
        raise ShapeError(f"add_chanbias: shapes {x.data.shape} + {b.data.shape}")
    return Tensor(x.data + b.data[:, None, None], (x, b), lambda g: (g, g.sum(axis=(1, 2))))


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ShapeError(f"mul: shapes differ {a.data.shape} vs {b.data.shape}")
    ad, bd = a.data, b.data
    return Tensor(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    return Tensor(a.data * s, (a,), lambda g: (g * s,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0.0
    return Tensor(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    old = a.data.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot view {old} as {shape}") from exc
    return Tensor(out, (a,), lambda g: (g.reshape(old),))


def sum_all(a: Tensor) -> Tensor:
    shape = a.data.shape
    return Tensor(a.data.sum(), (a,), lambda g: (np.broadcast_to(g, shape).copy(),))


def pick_rows(a: Tensor, indices) -> Tensor:
    """Select one entry per row: (m, n), idx (m,) -> (m,)."""
    if a.data.ndim != 2:
        raise ShapeError(f"pick_rows: expected a matrix, got shape {a.data.shape}")
    idx = np.asarray(indices, dtype=np.int64)
    m, n = a.data.shape
    if idx.shape != (m,):
        raise ShapeError(f"pick_rows: {m} rows but {idx.shape} indices")
    if np.any(idx < 0) or np.any(idx >= n):
        raise DomainError(f"pick_rows: index out of range 0..{n - 1}")
    rows = np.arange(m)

    def vjp(g):
        da = np.zeros((m, n))
        da[rows, idx] = g
        return (da,)

    return Tensor(a.data[rows, idx], (a,), vjp)


def log_softmax(a: Tensor) -> Tensor:
    """Numerically stable log-softmax along the last axis (length >= 2)."""
    if a.data.shape[-1] < 2:
        raise DomainError("log_softmax needs at least two classes")
    z = a.data - a.data.max(axis=-1, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    soft = np.exp(out)

    def vjp(g):
        return (g - soft * g.sum(axis=-1, keepdims=True),)

    return Tensor(out, (a,), vjp)


def conv2d(x: Tensor, kernels: Tensor, bias: Tensor) -> Tensor:
    """Valid-padding stride-1 cross-correlation plus per-channel bias.

    x: (c_in, h, w), kernels: (c_out, c_in, kh, kw), bias: (c_out,)
    -> (c_out, h - kh + 1, w - kw + 1).
    """
    if x.data.ndim != 3 or kernels.data.ndim != 4:
        raise ShapeError(f"conv2d: input {x.data.shape}, kernels {kernels.data.shape}")
    cin, h, w = x.data.shape
    cout, cin2, kh, kw = kernels.data.shape
    if cin2 != cin:
        raise ShapeError(f"conv2d: input channels {cin} vs kernel channels {cin2}")
    if kh > h or kw > w:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than input {h}x{w}")
    if bias.data.shape != (cout,):
        raise ShapeError(f"conv2d: bias shape {bias.data.shape}, expected ({cout},)")
    hp, wp = h - kh + 1, w - kw + 1
    win = np.lib.stride_tricks.sliding_window_view(x.data, (kh, kw), axis=(1, 2))
    patches = np.ascontiguousarray(win.transpose(1, 2, 0, 3, 4)).reshape(hp * wp, cin * kh * kw)
    kmat = kernels.data.reshape(cout, cin * kh * kw)
    out = (patches @ kmat.T).T.reshape(cout, hp, wp) + bias.data[:, None, None]
    kshape = kernels.data.shape
    xshape = x.data.shape

    def vjp(g):
        gflat = g.reshape(cout, hp * wp).T
        dk = (gflat.T @ patches).reshape(kshape)
        db = g.sum(axis=(1, 2))
        dpatch = (gflat @ kmat).reshape(hp, wp, cin, kh, kw)
        dx = np.zeros(xshape)
        for di in range(kh):
            for dj in range(kw):
                dx[:, di : di + hp, dj : dj + wp] += dpatch[:, :, :, di, dj].transpose(2, 0, 1)
        return dx, dk, db

    return Tensor(out, (x, kernels, bias), vjp)


def maxpool2d(x: Tensor) -> Tensor:
    """Non-overlapping 2x2 max pooling; odd trailing rows/cols are dropped."""
    if x.data.ndim != 3:
        raise ShapeError(f"maxpool2d: expected (c, h, w), got {x.data.shape}")
    c, h, w = x.data.shape
    if h < 2 or w < 2:
        raise ShapeError(f"maxpool2d: input {h}x{w} smaller than 2x2 window")
    h2, w2 = h // 2, w // 2
    win = (
        x.data[:, : 2 * h2, : 2 * w2]
        .reshape(c, h2, 2, w2, 2)
        .transpose(0, 1, 3, 2, 4)
        .reshape(c, h2, w2, 4)
    )
    arg = win.argmax(axis=3)  # first max wins ties
    out = np.take_along_axis(win, arg[..., None], axis=3)[..., 0]
    xshape = x.data.shape

    def vjp(g):
        dwin = np.zeros((c, h2, w2, 4))
        np.put_along_axis(dwin, arg[..., None], g[..., None], axis=3)
        dx = np.zeros(xshape)
        dx[:, : 2 * h2, : 2 * w2] = (
            dwin.reshape(c, h2, w2, 2, 2).transpose(0, 1, 3, 2, 4).reshape(c, 2 * h2, 2 * w2)
        )
        return (dx,)

    return Tensor(out, (x,), vjp)


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------


def grad_check(f: Callable[[Tensor], Tensor], point: np.ndarray, h: float = 1e-5) -> float:
    """Max relative error between reverse-mode and central-difference gradients.

    f must map a single Tensor to a scalar Tensor. Relative error per
    component uses denominator max(|g|, 1e-8) with g the reverse-mode value.
    """
    if h <= 0:
        raise DomainError("grad_check: step h must be positive")
    point = np.asarray(point, dtype=np.float64)
    leaf = Tensor(point)
    out = f(leaf)
    (g_ad,) = backward(out, [leaf])
    g_fd = np.zeros_like(point)
    flat = point.reshape(-1)
    fd_flat = g_fd.reshape(-1)
    for i in range(flat.size):
        bumped = flat.copy()
        bumped[i] = flat[i] + h
        hi = f(Tensor(bumped.reshape(point.shape))).data.item()
        bumped[i] = flat[i] - h
        lo = f(Tensor(bumped.reshape(point.shape))).data.item()
        fd_flat[i] = (hi - lo) / (2.0 * h)
    denom = np.maximum(np.abs(g_ad), 1e-8)
    return float(np.max(np.abs(g_ad - g_fd) / denom))
