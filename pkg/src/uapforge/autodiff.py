"""Reverse-mode automatic differentiation over dense float32 tensors.

The engine is define-by-run: primitives executed while a Graph is active are
appended to its tape, and ``backward`` replays the tape in reverse. Exactly the
primitives needed by the classifier zoo, the perturbation generator and the
attack losses are provided; everything is stored as row-major ``float32``.
"""

from __future__ import annotations

import math
from typing import Callable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

LOG_FLOOR = 1e-12  # lower bound fed to log() so finite inputs never produce -inf


class ShapeError(ValueError):
    """Input shapes invalid for a primitive; message names both."""

    def __init__(self, primitive: str, detail: str):
        self.primitive = primitive
        super().__init__(f"{primitive}: {detail}")


class UnsupportedNormError(ValueError):
    pass


class GraphError(RuntimeError):
    """Backward misuse: empty tape, non-scalar loss, or double backward."""


class Tensor:
    """A dense float32 array with an optional gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.ascontiguousarray(data, dtype=np.float32)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def copy(self) -> "Tensor":
        t = Tensor(self.data.copy(), requires_grad=self.requires_grad)
        return t

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, g: np.ndarray) -> None:
        if g.shape != self.data.shape:
            raise ShapeError("accumulate_grad", f"grad {g.shape} vs data {self.data.shape}")
        if self.grad is None:
            self.grad = g.astype(np.float32, copy=False)
        else:
            # fresh array: the first contribution may be a view into another
            # tensor's gradient buffer, which must not be mutated
            self.grad = self.grad + g

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


class _Node:
    __slots__ = ("op", "inputs", "output", "vjp")

    def __init__(self, op, inputs, output, vjp):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.vjp = vjp


_GRAPH_STACK: list["Graph"] = []


class Graph:
    """Ordered tape of executed primitives, owned by one forward pass.

    Used as a context manager; primitives run inside the ``with`` block are
    recorded when any of their inputs requires a gradient. A graph can be
    consumed by ``backward`` exactly once.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.consumed = False

    def __enter__(self) -> "Graph":
        _GRAPH_STACK.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _GRAPH_STACK.pop()


def _active_graph() -> Optional[Graph]:
    return _GRAPH_STACK[-1] if _GRAPH_STACK else None


def backward(graph: Graph, loss: Tensor) -> None:
    """Populate ``grad`` on every requires-grad leaf reachable from ``loss``.

    Leaves recorded on the tape that do not influence the loss receive a zero
    gradient. The tape is single-use: a second call without a fresh forward
    pass raises GraphError.
    """
    if graph.consumed:
        raise GraphError("backward called twice on the same graph; rebuild the forward pass")
    if not graph.nodes:
        raise GraphError("backward on an empty graph")
    if loss.data.size != 1:
        raise GraphError(f"loss must be scalar, got shape {loss.data.shape}")
    graph.consumed = True

    loss.grad = np.ones_like(loss.data)
    # Reverse execution order is a valid topological order for a tape.
    for node in reversed(graph.nodes):
        go = node.output.grad
        if go is None:
            continue
        grads = node.vjp(go)
        for t, g in zip(node.inputs, grads):
            if g is not None and t.requires_grad:
                t.accumulate_grad(g)
    for node in graph.nodes:
        for t in node.inputs:
            if t.requires_grad and t.grad is None:
                t.grad = np.zeros_like(t.data)


def _record(name: str, inputs: Sequence[Tensor], out_data: np.ndarray, vjp) -> Tensor:
    needs = any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs)
    g = _active_graph()
    if needs and g is not None:
        g.nodes.append(_Node(name, tuple(inputs), out, vjp))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _norm_p(p) -> float:
    if p in (2, 2.0, "2"):
        return 2.0
    if p in ("inf", math.inf, np.inf):
        return math.inf
    raise UnsupportedNormError(f"lp_norm supports p in {{2, inf}}, got {p!r}")


# ---------------------------------------------------------------------------
# primitive implementations
# ---------------------------------------------------------------------------


def _strided_windows(xp: np.ndarray, kh: int, kw: int, sh: int, sw: int) -> np.ndarray:
    # (N, C, Hp, Wp) -> (N, C, OH, OW, kh, kw) without copying
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    return win[:, :, ::sh, ::sw]


def conv2d(x: Tensor, w: Tensor, b: Optional[Tensor] = None, *, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation with weight (F, C, kh, kw); output (N, F, OH, OW)."""
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError("conv2d", f"need 4-d input/weight, got {x.shape} and {w.shape}")
    n, c, h, wd = x.shape
    f, c2, kh, kw = w.shape
    if c2 != c:
        raise ShapeError("conv2d", f"input channels {c} != weight channels {c2}")
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (wd + 2 * pad - kw) // stride + 1
    if oh <= 0 or ow <= 0:
        raise ShapeError("conv2d", f"kernel {kh}x{kw} too large for input {h}x{wd} with pad {pad}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    # cols layout (n, kh, kw, c, oh, ow): each kernel-position slice is a
    # contiguous block per sample, which keeps the gather/scatter loops fast
    cols = np.empty((n, kh, kw, c, oh, ow), dtype=np.float32)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xp[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride]
    cols3 = cols.reshape(n, kh * kw * c, oh * ow)
    wmat = np.ascontiguousarray(w.data.transpose(2, 3, 1, 0).reshape(kh * kw * c, f).T)
    out3 = np.matmul(wmat, cols3)
    if b is not None:
        if b.shape != (f,):
            raise ShapeError("conv2d", f"bias {b.shape} != ({f},)")
        out3 += b.data[:, None]

    def vjp(go):
        go3 = go.reshape(n, f, oh * ow)
        gw = gb = gx = None
        if w.requires_grad:
            gw_kkc = np.tensordot(go3, cols3, axes=([0, 2], [0, 2]))
            gw = np.ascontiguousarray(gw_kkc.reshape(f, kh, kw, c).transpose(0, 3, 1, 2))
        if b is not None and b.requires_grad:
            gb = go3.sum(axis=(0, 2))
        if x.requires_grad:
            gcols = np.matmul(wmat.T, go3).reshape(n, kh, kw, c, oh, ow)
            hp, wp = h + 2 * pad, wd + 2 * pad
            gxp = np.zeros((n, c, hp, wp), dtype=np.float32)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += gcols[
                        :, i, j
                    ]
            gx = gxp[:, :, pad : pad + h, pad : pad + wd] if pad else gxp
        return (gx, gw, gb) if b is not None else (gx, gw)

    inputs = (x, w, b) if b is not None else (x, w)
    return _record("conv2d", inputs, out3.reshape(n, f, oh, ow), vjp)


def deconv2d(
    x: Tensor,
    w: Tensor,
    b: Optional[Tensor] = None,
    *,
    stride: int = 1,
    pad: int = 0,
    output_pad: int = 0,
) -> Tensor:
    """Transposed convolution, weight (C, F, kh, kw); output (N, F, OH, OW).

    OH = (H-1)*stride - 2*pad + kh + output_pad, mirroring the standard
    transposed-convolution shape formula. output_pad must satisfy
    0 <= output_pad < stride.
    """
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError("deconv2d", f"need 4-d input/weight, got {x.shape} and {w.shape}")
    n, c, h, wd = x.shape
    c2, f, kh, kw = w.shape
    if c2 != c:
        raise ShapeError("deconv2d", f"input channels {c} != weight channels {c2}")
    if not (0 <= output_pad < max(stride, 1)):
        raise ShapeError("deconv2d", f"output_pad {output_pad} must be in [0, stride)")
    oh = (h - 1) * stride - 2 * pad + kh + output_pad
    ow = (wd - 1) * stride - 2 * pad + kw + output_pad
    if oh <= 0 or ow <= 0:
        raise ShapeError("deconv2d", f"degenerate output {oh}x{ow}")

    x3 = x.data.reshape(n, c, h * wd)
    # weight viewed as (kh, kw, f, c) so scatter slices are contiguous blocks
    wmat = np.ascontiguousarray(w.data.transpose(2, 3, 1, 0).reshape(kh * kw * f, c))
    mat = np.matmul(wmat, x3).reshape(n, kh, kw, f, h, wd)
    full_h = (h - 1) * stride + kh + output_pad
    full_w = (wd - 1) * stride + kw + output_pad
    buf = np.zeros((n, f, full_h, full_w), dtype=np.float32)
    for i in range(kh):
        for j in range(kw):
            buf[:, :, i : i + stride * h : stride, j : j + stride * wd : stride] += mat[:, i, j]
    out = buf[:, :, pad : full_h - pad, pad : full_w - pad] if pad else buf
    if b is not None:
        if b.shape != (f,):
            raise ShapeError("deconv2d", f"bias {b.shape} != ({f},)")
        out = out + b.data[:, None, None]

    def vjp(go):
        gop = np.pad(go, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else go
        gcols = np.empty((n, kh, kw, f, h, wd), dtype=np.float32)
        for i in range(kh):
            for j in range(kw):
                gcols[:, i, j] = gop[:, :, i : i + stride * h : stride, j : j + stride * wd : stride]
        g3 = gcols.reshape(n, kh * kw * f, h * wd)
        gx = gw = gb = None
        if x.requires_grad:
            gx = np.matmul(wmat.T, g3).reshape(n, c, h, wd)
        if w.requires_grad:
            gw_kkf = np.tensordot(g3, x3, axes=([0, 2], [0, 2]))
            gw = np.ascontiguousarray(gw_kkf.reshape(kh, kw, f, c).transpose(3, 2, 0, 1))
        if b is not None and b.requires_grad:
            gb = go.sum(axis=(0, 2, 3))
        return (gx, gw, gb) if b is not None else (gx, gw)

    inputs = (x, w, b) if b is not None else (x, w)
    return _record("deconv2d", inputs, np.ascontiguousarray(out), vjp)


def batchnorm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    *,
    training: bool,
    state: Optional[dict] = None,
    momentum: float = 0.9,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel normalization for (N, C, H, W) or (N, C) inputs.

    In training mode the current batch statistics are used (biased variance)
    and, when ``state`` holds 'mean'/'var' buffers, the running statistics are
    updated as running = momentum * running + (1 - momentum) * batch. Eval
    mode normalizes with the running buffers and requires ``state``.
    """
    nd = x.data.ndim
    if nd not in (2, 4):
        raise ShapeError("batchnorm2d", f"need 2-d or 4-d input, got {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError("batchnorm2d", f"gamma/beta {gamma.shape}/{beta.shape} != ({c},)")
    axes = (0, 2, 3) if nd == 4 else (0,)
    shape_c = (1, c, 1, 1) if nd == 4 else (1, c)

    m = x.data.size // c
    if training or state is None:
        if nd == 4:
            mu = np.einsum("nchw->c", x.data) / np.float32(m)
            sq = np.einsum("nchw,nchw->c", x.data, x.data) / np.float32(m)
        else:
            mu = x.data.mean(axis=0)
            sq = np.square(x.data).mean(axis=0)
        var = np.maximum(sq - mu * mu, 0.0)
        if training and state is not None:
            state["mean"] *= momentum
            state["mean"] += (1.0 - momentum) * mu
            state["var"] *= momentum
            state["var"] += (1.0 - momentum) * var
        use_batch = True
    else:
        mu, var = state["mean"], state["var"]
        use_batch = False

    ivar = 1.0 / np.sqrt(var + eps)
    # out = x * a + d with per-channel a, d folds the affine into two passes
    a = (gamma.data * ivar).astype(np.float32)
    d = (beta.data - mu * a).astype(np.float32)
    out = x.data * a.reshape(shape_c) + d.reshape(shape_c)
    xhat = None

    def vjp(go):
        nonlocal xhat
        gg = gb = gx = None
        need_stats = gamma.requires_grad or (x.requires_grad and use_batch)
        if need_stats and xhat is None:
            xhat = (x.data - mu.reshape(shape_c)) * ivar.reshape(shape_c)
        if gamma.requires_grad:
            if nd == 4:
                gg = np.einsum("nchw,nchw->c", go, xhat)
            else:
                gg = (go * xhat).sum(axis=0)
        if beta.requires_grad or (x.requires_grad and use_batch):
            gb = np.einsum("nchw->c", go) if nd == 4 else go.sum(axis=0)
        if x.requires_grad:
            if use_batch:
                ggx = gg
                if ggx is None:
                    ggx = np.einsum("nchw,nchw->c", go, xhat) if nd == 4 else (go * xhat).sum(axis=0)
                corr = (gb / m).reshape(shape_c) + xhat * (ggx / m).reshape(shape_c)
                gx = (go - corr) * a.reshape(shape_c)
            else:
                gx = go * a.reshape(shape_c)
            gx = gx.astype(np.float32, copy=False)
        if gb is not None and not beta.requires_grad:
            gb = None
        return gx, None if gg is None else gg.astype(np.float32), None if gb is None else gb.astype(np.float32)

    return _record("batchnorm2d", (x, gamma, beta), out.astype(np.float32, copy=False), vjp)


def feature_norm(x: Tensor, gamma: Tensor, beta: Tensor, *, eps: float = 1e-5) -> Tensor:
    """Per-sample normalization over the feature axis of an (N, F) input.

    Stands in for batch normalization where the generator runs on single
    samples: batch statistics are degenerate at batch size one, so each row is
    normalized by its own feature mean/variance. Affine per feature; train and
    eval behave identically.
    """
    if x.data.ndim != 2:
        raise ShapeError("feature_norm", f"need 2-d input, got {x.shape}")
    f = x.shape[1]
    if gamma.shape != (f,) or beta.shape != (f,):
        raise ShapeError("feature_norm", f"gamma/beta {gamma.shape}/{beta.shape} != ({f},)")
    mu = x.data.mean(axis=1, keepdims=True)
    var = x.data.var(axis=1, keepdims=True)
    ivar = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * ivar
    out = gamma.data * xhat + beta.data

    def vjp(go):
        gg = (go * xhat).sum(axis=0)
        gb = go.sum(axis=0)
        gi = go * gamma.data
        gx = (gi - gi.mean(axis=1, keepdims=True) - xhat * (gi * xhat).mean(axis=1, keepdims=True)) * ivar
        return gx.astype(np.float32), gg.astype(np.float32), gb.astype(np.float32)

    return _record("feature_norm", (x, gamma, beta), out.astype(np.float32), vjp)


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0.0)
    mask = x.data > 0  # zero gradient at exactly 0

    def vjp(go):
        return (go * mask,)

    return _record("relu", (x,), out, vjp)


def fully_connected(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """Affine map x @ w.T + b with weight (out_features, in_features)."""
    if x.data.ndim != 2 or w.data.ndim != 2:
        raise ShapeError("fully_connected", f"need 2-d input/weight, got {x.shape} and {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ShapeError("fully_connected", f"input features {x.shape[1]} != weight features {w.shape[1]}")
    out = x.data @ w.data.T
    if b is not None:
        if b.shape != (w.shape[0],):
            raise ShapeError("fully_connected", f"bias {b.shape} != ({w.shape[0]},)")
        out += b.data

    def vjp(go):
        gx = go @ w.data
        gw = go.T @ x.data
        gb = go.sum(axis=0) if b is not None else None
        return (gx, gw, gb) if b is not None else (gx, gw)

    inputs = (x, w, b) if b is not None else (x, w)
    return _record("fully_connected", inputs, out, vjp)


def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.data + b.data
    except ValueError:
        raise ShapeError("add", f"shapes {a.shape} and {b.shape} do not broadcast") from None

    def vjp(go):
        return _unbroadcast(go, a.shape), _unbroadcast(go, b.shape)

    return _record("add", (a, b), out, vjp)


def mul(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.data * b.data
    except ValueError:
        raise ShapeError("mul", f"shapes {a.shape} and {b.shape} do not broadcast") from None

    def vjp(go):
        return _unbroadcast(go * b.data, a.shape), _unbroadcast(go * a.data, b.shape)

    return _record("mul", (a, b), out, vjp)


def scalar_mul(x: Tensor, c: float) -> Tensor:
    c = float(c)
    out = x.data * np.float32(c)

    def vjp(go):
        return (go * np.float32(c),)

    return _record("scalar_mul", (x,), out, vjp)


def sub(a: Tensor, b: Tensor) -> Tensor:
    return add(a, scalar_mul(b, -1.0))


def clamp(x: Tensor, lo: Optional[float] = None, hi: Optional[float] = None) -> Tensor:
    """Clip to [lo, hi]; either bound may be None (unbounded).

    Gradient convention: 1 strictly inside (lo, hi), 0 at and beyond the
    boundaries.
    """
    if lo is None and hi is None:
        raise ValueError("clamp needs at least one bound")
    if lo is not None and hi is not None and lo > hi:
        raise ValueError(f"clamp bounds inverted: lo={lo} > hi={hi}")
    out = np.clip(x.data, lo, hi)
    mask = np.ones(x.shape, dtype=bool)
    if lo is not None:
        mask &= x.data > lo
    if hi is not None:
        mask &= x.data < hi

    def vjp(go):
        return (go * mask,)

    return _record("clamp", (x,), out, vjp)


def log(x: Tensor) -> Tensor:
    """Natural log with the argument floored at LOG_FLOOR to stay finite."""
    safe = np.maximum(x.data, LOG_FLOOR)
    out = np.log(safe)
    mask = x.data > LOG_FLOOR

    def vjp(go):
        return (go * mask / safe,)

    return _record("log", (x,), out, vjp)


def log_softmax(x: Tensor) -> Tensor:
    """Row-wise log-probabilities over the last axis, computed stably."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    sm = np.exp(out)

    def vjp(go):
        return (go - sm * go.sum(axis=-1, keepdims=True),)

    return _record("log_softmax", (x,), out, vjp)


def softmax(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def vjp(go):
        dot = (go * out).sum(axis=-1, keepdims=True)
        return (out * (go - dot),)

    return _record("softmax", (x,), out, vjp)


def lp_norm(x: Tensor, p) -> Tensor:
    """Whole-tensor l2 or l-infinity norm as a scalar tensor.

    The l-infinity subgradient is routed entirely to the first element of
    maximal magnitude (lowest flat index on ties).
    """
    pv = _norm_p(p)
    flat = x.data.reshape(-1)
    if pv == 2.0:
        nrm = float(np.sqrt(np.sum(flat.astype(np.float64) ** 2)))

        def vjp(go):
            if nrm == 0.0:
                return (np.zeros_like(x.data),)
            return ((x.data / np.float32(nrm)) * go.reshape(()),)

    else:
        k = int(np.argmax(np.abs(flat)))
        nrm = float(abs(flat[k]))

        def vjp(go):
            g = np.zeros_like(flat)
            g[k] = math.copysign(1.0, flat[k]) * float(go.reshape(()))
            return (g.reshape(x.shape),)

    return _record("lp_norm", (x,), np.float32(nrm), vjp)


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != x.size:
        raise ShapeError("reshape", f"cannot reshape {x.shape} to {shape}")
    old = x.shape
    out = x.data.reshape(shape)

    def vjp(go):
        return (go.reshape(old),)

    return _record("reshape", (x,), out, vjp)


def gather_class(x: Tensor, index) -> Tensor:
    """Pick one column per row of an (N, K) tensor: out[n] = x[n, index[n]]."""
    if x.data.ndim != 2:
        raise ShapeError("gather_class", f"need 2-d input, got {x.shape}")
    n, k = x.shape
    idx = np.asarray(index, dtype=np.int64)
    if idx.ndim == 0:
        idx = np.full(n, int(idx), dtype=np.int64)
    if idx.shape != (n,):
        raise ShapeError("gather_class", f"index shape {idx.shape} != ({n},)")
    if idx.min() < 0 or idx.max() >= k:
        raise IndexError(f"gather_class: class index out of range [0, {k})")
    rows = np.arange(n)
    out = x.data[rows, idx]

    def vjp(go):
        g = np.zeros_like(x.data)
        g[rows, idx] = go
        return (g,)

    return _record("gather_class", (x,), out, vjp)


def max_over_classes_excluding(x: Tensor, exclude) -> Tensor:
    """Row-wise max of an (N, K) tensor with one class masked out per row.

    Gradient is routed to the argmax entry (lowest index on ties).
    """
    if x.data.ndim != 2:
        raise ShapeError("max_over_classes_excluding", f"need 2-d input, got {x.shape}")
    n, k = x.shape
    if k < 2:
        raise ShapeError("max_over_classes_excluding", f"need >= 2 classes, got {k}")
    ex = np.asarray(exclude, dtype=np.int64)
    if ex.ndim == 0:
        ex = np.full(n, int(ex), dtype=np.int64)
    if ex.shape != (n,):
        raise ShapeError("max_over_classes_excluding", f"exclude shape {ex.shape} != ({n},)")
    if ex.min() < 0 or ex.max() >= k:
        raise IndexError(f"max_over_classes_excluding: class index out of range [0, {k})")
    rows = np.arange(n)
    masked = x.data.copy()
    masked[rows, ex] = -np.inf
    arg = masked.argmax(axis=1)
    out = masked[rows, arg]

    def vjp(go):
        g = np.zeros_like(x.data)
        g[rows, arg] = go
        return (g,)

    return _record("max_over_classes_excluding", (x,), out, vjp)


def mean(x: Tensor) -> Tensor:
    out = np.float32(x.data.mean(dtype=np.float64))
    inv = np.float32(1.0 / x.size)

    def vjp(go):
        return (np.full(x.shape, go.reshape(()) * inv, dtype=np.float32),)

    return _record("mean", (x,), out, vjp)


def tensor_sum(x: Tensor) -> Tensor:
    out = np.float32(x.data.sum(dtype=np.float64))

    def vjp(go):
        return (np.full(x.shape, go.reshape(()), dtype=np.float32),)

    return _record("sum", (x,), out, vjp)


_PRIMITIVES: dict[str, Callable] = {
    "conv2d": conv2d,
    "deconv2d": deconv2d,
    "batchnorm2d": batchnorm2d,
    "feature_norm": feature_norm,
    "relu": relu,
    "fully_connected": fully_connected,
    "add": add,
    "mul": mul,
    "scalar_mul": scalar_mul,
    "clamp": clamp,
    "log": log,
    "log_softmax": log_softmax,
    "softmax": softmax,
    "lp_norm": lp_norm,
    "reshape": reshape,
    "gather_class": gather_class,
    "max_over_classes_excluding": max_over_classes_excluding,
    "mean": mean,
    "sum": tensor_sum,
}


def apply_primitive(name: str, inputs: Sequence[Tensor], **attrs) -> Tensor:
    """Dispatch a primitive by name; tensor inputs positional, attrs by key."""
    try:
        fn = _PRIMITIVES[name]
    except KeyError:
        raise KeyError(f"unknown primitive {name!r}; have {sorted(_PRIMITIVES)}") from None
    return fn(*inputs, **attrs)


def primitive_names() -> list[str]:
    return sorted(_PRIMITIVES)
