"""Reverse-mode automatic differentiation over numpy arrays.

Every differentiable operation appends a node ``(op, input ids, ctx)`` to the
active :class:`ComputationRecord`. :func:`backward` walks the record in
reverse append order and dispatches each node through :data:`BACKWARD`, a
table keyed by op name. Keeping the rules in a table (rather than closures)
lets the gradient checker swap a rule out to prove it can detect a bad one.
"""

from __future__ import annotations

import itertools
import threading
from typing import Callable, Sequence

import numpy as np
from scipy import sparse

DTYPE = np.float64

_local = threading.local()
_serials = itertools.count(1)


def _active() -> "ComputationRecord | None":
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


class Tensor:
    """n-d float64 array that can participate in a recorded computation."""

    __slots__ = ("data", "grad", "requires_grad", "node_id", "_record")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False):
        data = np.asarray(data, dtype=DTYPE)
        self.data = data if data.flags.c_contiguous else np.ascontiguousarray(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.node_id: int | None = None
        self._record = 0  # serial of the record holding node_id; ints avoid tensor<->record cycles

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return tmean(self, axis, keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class _Node:
    __slots__ = ("op", "inputs", "input_ids", "ctx")

    def __init__(self, op, inputs, ctx):
        self.op = op
        self.inputs = inputs
        self.input_ids = tuple(t.node_id for t in inputs)
        self.ctx = ctx


class ComputationRecord:
    """Append-only tape of the operations executed while it is active.

    Use as a context manager; ops executed inside the ``with`` block on
    tensors that require gradients are recorded here.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self._tensors: list[Tensor] = []
        self.serial = next(_serials)

    def __enter__(self):
        stack = getattr(_local, "stack", None)
        if stack is None:
            stack = _local.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc):
        _local.stack.pop()
        return False

    def __len__(self) -> int:
        return len(self.nodes)

    def _ensure_leaf(self, t: Tensor) -> None:
        if t._record != self.serial:
            t._record = self.serial
            t.node_id = len(self.nodes)
            self.nodes.append(_Node("leaf", (), None))
            self._tensors.append(t)

    def _append(self, op: str, inputs: Sequence[Tensor], ctx, out: Tensor) -> None:
        tracked = tuple(t for t in inputs if t.requires_grad)
        for t in tracked:
            self._ensure_leaf(t)
        node = _Node(op, tuple(inputs), ctx)
        out._record = self.serial
        out.node_id = len(self.nodes)
        self.nodes.append(node)
        self._tensors.append(out)


def _emit(op: str, out_data: np.ndarray, inputs: Sequence[Tensor], ctx) -> Tensor:
    req = any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=req)
    rec = _active()
    if rec is not None and req:
        rec._append(op, inputs, ctx, out)
    return out


def backward(record: ComputationRecord, root: Tensor) -> dict[int, np.ndarray]:
    """Propagate d(root)/d(.) through ``record``.

    Sets ``.grad`` on every leaf registered in the record (zeros for leaves the
    root does not depend on) and returns ``{node_id: grad}`` for those leaves.
    Gradients are recomputed from scratch on every call.
    """
    if root.data.ndim != 0:
        raise ValueError(f"backward root must be a scalar, got shape {root.shape}")
    if root._record != record.serial:
        raise ValueError("root was not produced inside this record")
    n = len(record.nodes)
    grads: list[np.ndarray | None] = [None] * n
    grads[root.node_id] = np.ones((), dtype=DTYPE)
    for i in range(root.node_id, -1, -1):
        g = grads[i]
        node = record.nodes[i]
        if g is None or node.op == "leaf":
            continue
        in_grads = BACKWARD[node.op](node.ctx, g)
        for t, tid, ig in zip(node.inputs, node.input_ids, in_grads):
            if ig is None or not t.requires_grad:
                continue
            if grads[tid] is None:
                grads[tid] = ig
            else:
                grads[tid] = grads[tid] + ig
    leaves = {}
    for i, node in enumerate(record.nodes):
        if node.op != "leaf":
            continue
        t = record._tensors[i]
        g = grads[i]
        t.grad = np.zeros_like(t.data) if g is None else np.array(g, dtype=DTYPE).reshape(t.shape)
        leaves[i] = t.grad
    return leaves


BACKWARD: dict[str, Callable] = {}


def _rule(name):
    def deco(fn):
        BACKWARD[name] = fn
        return fn

    return deco


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# -- elementwise -------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _emit("add", a.data + b.data, (a, b), (a.shape, b.shape))


@_rule("add")
def _add_bw(ctx, g):
    sa, sb = ctx
    return _unbroadcast(g, sa), _unbroadcast(g, sb)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _emit("sub", a.data - b.data, (a, b), (a.shape, b.shape))


@_rule("sub")
def _sub_bw(ctx, g):
    sa, sb = ctx
    return _unbroadcast(g, sa), _unbroadcast(-g, sb)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _emit("mul", a.data * b.data, (a, b), (a.data, b.data))


@_rule("mul")
def _mul_bw(ctx, g):
    a, b = ctx
    return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _emit("exp", out, (x,), out)


@_rule("exp")
def _exp_bw(out, g):
    return (g * out,)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _emit("relu", np.where(mask, x.data, 0.0), (x,), mask)


@_rule("relu")
def _relu_bw(mask, g):
    return (g * mask,)


# -- shape -------------------------------------------------------------------


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    return _emit("sum", np.sum(x.data, axis=axis, keepdims=keepdims), (x,), (x.shape, axis, keepdims))


@_rule("sum")
def _sum_bw(ctx, g):
    shape, axis, keepdims = ctx
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return (np.broadcast_to(g, shape),)


def tmean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.mean(x.data, axis=axis, keepdims=keepdims)
    count = x.data.size // max(np.size(out), 1)
    return _emit("mean", out, (x,), (x.shape, axis, keepdims, count))


@_rule("mean")
def _mean_bw(ctx, g):
    shape, axis, keepdims, count = ctx
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return (np.broadcast_to(g / count, shape),)


def reshape(x: Tensor, shape) -> Tensor:
    return _emit("reshape", x.data.reshape(shape), (x,), x.shape)


@_rule("reshape")
def _reshape_bw(shape, g):
    return (g.reshape(shape),)


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    return _emit("transpose", np.transpose(x.data, axes), (x,), np.argsort(axes))


@_rule("transpose")
def _transpose_bw(inv, g):
    return (np.transpose(g, inv),)


def _is_basic(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (slice, int, type(Ellipsis))) or i is None for i in items)


def getitem(x: Tensor, idx) -> Tensor:
    return _emit("getitem", x.data[idx], (x,), (x.shape, idx))


@_rule("getitem")
def _getitem_bw(ctx, g):
    shape, idx = ctx
    out = np.zeros(shape, dtype=DTYPE)
    if _is_basic(idx):
        out[idx] = g
    else:
        np.add.at(out, idx, g)
    return (out,)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _emit("concat", data, tuple(tensors), (sizes, axis))


@_rule("concat")
def _concat_bw(ctx, g):
    sizes, axis = ctx
    return tuple(np.split(g, sizes, axis=axis))


# -- linear algebra ----------------------------------------------------------


def matmul(a, b) -> Tensor:
    """Batched matrix product (numpy ``@`` semantics, both operands ≥ 2-d)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul operands must have at least 2 dimensions")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    return _emit("matmul", a.data @ b.data, (a, b), (a.data, b.data))


@_rule("matmul")
def _matmul_bw(ctx, g):
    a, b = ctx
    ga = g @ np.swapaxes(b, -1, -2)
    gb = np.swapaxes(a, -1, -2) @ g
    return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)


def affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """``x @ w + b`` applied over the last axis of ``x``."""
    if w.ndim != 2 or x.shape[-1] != w.shape[0] or b.shape != (w.shape[1],):
        raise ValueError(f"affine shape mismatch: x{x.shape} w{w.shape} b{b.shape}")
    return _emit("affine", x.data @ w.data + b.data, (x, w, b), (x.data, w.data))


@_rule("affine")
def _affine_bw(ctx, g):
    x, w = ctx
    g2 = g.reshape(-1, g.shape[-1])
    x2 = x.reshape(-1, x.shape[-1])
    return g @ w.T, x2.T @ g2, g2.sum(axis=0)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, axis: int = -1, eps: float = 1e-5) -> Tensor:
    """Normalize ``x`` over ``axis`` then scale/shift by gamma/beta.

    A zero-variance slice normalizes to exactly 0, so its output is ``beta``.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    d = x.data
    mean = d.mean(axis=axis, keepdims=True)
    centered = d - mean
    var = (centered * centered).mean(axis=axis, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    const = d.max(axis=axis, keepdims=True) == d.min(axis=axis, keepdims=True)
    if const.any():
        xhat = np.where(const, 0.0, xhat)
    try:
        out = xhat * gamma.data + beta.data
    except ValueError as e:
        raise ValueError(f"layer_norm parameter shape mismatch: {e}") from None
    return _emit("layer_norm", out, (x, gamma, beta), (xhat, inv, gamma.data, beta.shape, axis))


@_rule("layer_norm")
def _layer_norm_bw(ctx, g):
    xhat, inv, gamma, beta_shape, axis = ctx
    gx_hat = g * gamma
    gx = inv * (
        gx_hat
        - gx_hat.mean(axis=axis, keepdims=True)
        - xhat * (gx_hat * xhat).mean(axis=axis, keepdims=True)
    )
    return gx, _unbroadcast(g * xhat, gamma.shape), _unbroadcast(g, beta_shape)


# -- image ops ---------------------------------------------------------------


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Zero-padded 2-d cross-correlation, NCHW layout."""
    if x.ndim != 4 or kernel.ndim != 4:
        raise ValueError("conv2d expects input [N,C,H,W] and kernel [F,C,kh,kw]")
    n, c, h, w = x.shape
    f, kc, kh, kw = kernel.shape
    if kc != c:
        raise ValueError(f"conv2d channel mismatch: input has {c}, kernel expects {kc}")
    if bias.shape != (f,):
        raise ValueError(f"conv2d bias must have shape ({f},), got {bias.shape}")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise ValueError("kernel larger than padded input")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    cols = _im2col(xp, kh, kw, stride, ho, wo)
    kmat = kernel.data.reshape(f, -1)
    out = cols @ kmat.T + bias.data
    out = out.reshape(n, ho, wo, f).transpose(0, 3, 1, 2)
    ctx = (cols, kmat, xp.shape, kernel.shape, stride, padding, ho, wo, x.requires_grad)
    return _emit("conv2d", np.ascontiguousarray(out), (x, kernel, bias), ctx)


def _im2col(xp, kh, kw, stride, ho, wo):
    n, c = xp.shape[:2]
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
    # (N, C, ho, wo, kh, kw) -> (N*ho*wo, C*kh*kw)
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)


@_rule("conv2d")
def _conv2d_bw(ctx, g):
    cols, kmat, xp_shape, kshape, stride, padding, ho, wo, need_x = ctx
    n, c, hp, wp = xp_shape
    f, _, kh, kw = kshape
    g2 = g.transpose(0, 2, 3, 1).reshape(-1, f)
    gk = (g2.T @ cols).reshape(kshape)
    gb = g2.sum(axis=0)
    if not need_x:
        return None, gk, gb
    gcols = (g2 @ kmat).reshape(n, ho, wo, c, kh, kw)
    gxp = np.zeros(xp_shape, dtype=DTYPE)
    he = (ho - 1) * stride + 1
    we = (wo - 1) * stride + 1
    for i in range(kh):
        for j in range(kw):
            gxp[:, :, i : i + he : stride, j : j + we : stride] += gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    if padding:
        gxp = gxp[:, :, padding:-padding, padding:-padding]
    return gxp, gk, gb


def maxpool2d(x: Tensor, window: int) -> Tensor:
    """Non-overlapping max pooling; ties go to the first element in row-major order."""
    if x.ndim != 4:
        raise ValueError("maxpool2d expects [N,C,H,W]")
    n, c, h, w = x.shape
    if window < 1 or h % window or w % window:
        raise ValueError(f"maxpool2d: {h}x{w} not divisible by window {window}")
    ho, wo = h // window, w // window
    blocks = x.data.reshape(n, c, ho, window, wo, window).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, window * window)
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]
    return _emit("maxpool2d", out, (x,), (arg, x.shape, window))


@_rule("maxpool2d")
def _maxpool2d_bw(ctx, g):
    arg, shape, window = ctx
    n, c, h, w = shape
    ho, wo = h // window, w // window
    blocks = np.zeros((n, c, ho, wo, window * window), dtype=DTYPE)
    np.put_along_axis(blocks, arg[..., None], g[..., None], axis=-1)
    gx = blocks.reshape(n, c, ho, wo, window, window).transpose(0, 1, 2, 4, 3, 5).reshape(shape)
    return (gx,)


_ROI_OFFSETS = np.array([-1.0, 0.0, 1.0])


def bilinear_roi_pool(featmap: Tensor, centers: Tensor) -> Tensor:
    """Average of a 3x3 grid of bilinear samples around each center.

    ``featmap`` is [C,H,W] (or batched [N,C,H,W]); ``centers`` holds normalized
    (x, y) positions in [0,1]^2, shape [M,2] (or [N,M,2]). The grid points sit
    at -1, 0, +1 feature-map pixels from the center and are clamped to the
    range of pixel centers. Output is [M,C] (or [N,M,C]); gradients flow to both
    the feature map and the centers.
    """
    batched = featmap.ndim == 4
    fm = featmap.data if batched else featmap.data[None]
    ct = centers.data if batched else centers.data[None]
    if fm.ndim != 4 or ct.ndim != 3 or ct.shape[-1] != 2 or ct.shape[0] != fm.shape[0]:
        raise ValueError(f"bilinear_roi_pool shape mismatch: featmap {featmap.shape}, centers {centers.shape}")
    n, c, h, w = fm.shape
    m = ct.shape[1]
    px = ct[:, :, 0] * w - 0.5
    py = ct[:, :, 1] * h - 0.5
    # sample grids (N, M, 3)
    sx_raw = px[..., None] + _ROI_OFFSETS
    sy_raw = py[..., None] + _ROI_OFFSETS
    sx = np.clip(sx_raw, 0.0, w - 1)
    sy = np.clip(sy_raw, 0.0, h - 1)
    x0 = np.minimum(np.floor(sx), max(w - 2, 0)).astype(np.intp)
    y0 = np.minimum(np.floor(sy), max(h - 2, 0)).astype(np.intp)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    wx = sx - x0
    wy = sy - y0
    # broadcast to the full 3x3 grid: (N, M, 3y, 3x)
    X0, X1, WX = x0[:, :, None, :], x1[:, :, None, :], wx[:, :, None, :]
    Y0, Y1, WY = y0[:, :, :, None], y1[:, :, :, None], wy[:, :, :, None]
    fmt = fm.transpose(0, 2, 3, 1)  # N,H,W,C
    bi = np.arange(n)[:, None, None, None]
    f00 = fmt[bi, Y0, X0]
    f01 = fmt[bi, Y0, X1]
    f10 = fmt[bi, Y1, X0]
    f11 = fmt[bi, Y1, X1]
    WXc, WYc = WX[..., None], WY[..., None]
    top = f00 + (f01 - f00) * WXc
    bot = f10 + (f11 - f10) * WXc
    vals = top + (bot - top) * WYc  # N,M,3,3,C
    out = vals.mean(axis=(2, 3))
    ctx = dict(
        shape=fm.shape, batched=batched, idx=(bi, Y0, Y1, X0, X1), w=(WX, WY),
        f=(f00, f01, f10, f11), inx=(sx_raw > 0) & (sx_raw < w - 1), iny=(sy_raw > 0) & (sy_raw < h - 1),
    )
    if not batched:
        out = out[0]
    return _emit("roi_pool", out, (featmap, centers), ctx)


@_rule("roi_pool")
def _roi_pool_bw(ctx, g):
    n, c, h, w = ctx["shape"]
    if not ctx["batched"]:
        g = g[None]
    bi, Y0, Y1, X0, X1 = ctx["idx"]
    WX, WY = ctx["w"]
    f00, f01, f10, f11 = ctx["f"]
    gs = g[:, :, None, None, :] / 9.0  # N,M,1,1,C
    WXc, WYc = WX[..., None], WY[..., None]
    # scatter the four bilinear corner contributions as one sparse product
    shp = np.broadcast_shapes(Y0.shape, X0.shape)
    flat_idx, weights = [], []
    for yy, xx, wgt in (
        (Y0, X0, (1 - WX) * (1 - WY)),
        (Y0, X1, WX * (1 - WY)),
        (Y1, X0, (1 - WX) * WY),
        (Y1, X1, WX * WY),
    ):
        flat_idx.append(np.broadcast_to((bi * h + yy) * w + xx, shp).reshape(n, -1))
        weights.append(np.broadcast_to(wgt, shp).reshape(n, -1))
    flat_idx = np.concatenate(flat_idx, axis=1)  # N, 4*M*9
    weights = np.concatenate(weights, axis=1)
    rows = np.repeat(np.arange(n * shp[1]).reshape(n, -1), 9, axis=1)  # sample row (b, m) per grid point
    rows = np.concatenate([rows] * 4, axis=1)
    scat = sparse.csr_matrix((weights.ravel(), (flat_idx.ravel(), rows.ravel())), shape=(n * h * w, n * shp[1]))
    gfm = np.asarray(scat @ (g.reshape(n * shp[1], c) / 9.0)).reshape(n, h, w, c)
    # d value / d sample coords
    dvx = ((f01 - f00) * (1 - WYc) + (f11 - f10) * WYc)  # N,M,3,3,C
    dvy = ((f10 - f00) * (1 - WXc) + (f11 - f01) * WXc)
    gx_s = (dvx * gs).sum(axis=(-1, 2)) * ctx["inx"]  # sum over C and y-grid -> N,M,3
    gy_s = (dvy * gs).sum(axis=(-1, 3)) * ctx["iny"]
    gcx = gx_s.sum(axis=-1) * w
    gcy = gy_s.sum(axis=-1) * h
    gcent = np.stack([gcx, gcy], axis=-1)
    gfm = gfm.transpose(0, 3, 1, 2)
    if not ctx["batched"]:
        return gfm[0], gcent[0]
    return gfm, gcent


# -- losses / latent ---------------------------------------------------------


def mse(pred: Tensor, target) -> Tensor:
    """Mean over all elements of the squared difference."""
    target = as_tensor(target)
    if pred.shape != target.shape:
        raise ValueError(f"mse shape mismatch: {pred.shape} vs {target.shape}")
    diff = pred.data - target.data
    return _emit("mse", np.mean(diff * diff), (pred, target), diff)


@_rule("mse")
def _mse_bw(diff, g):
    gd = g * 2.0 * diff / diff.size
    return gd, -gd


def kl_divergence(mu: Tensor, logvar: Tensor) -> Tensor:
    """KL(q || N(0, I)) summed over the last axis, averaged over leading axes."""
    if mu.shape != logvar.shape:
        raise ValueError(f"kl_divergence shape mismatch: {mu.shape} vs {logvar.shape}")
    ev = np.exp(logvar.data)
    terms = mu.data**2 + ev - 1.0 - logvar.data
    batch = terms.size // terms.shape[-1] if terms.ndim else 1
    val = 0.5 * terms.sum() / batch
    return _emit("kl", np.asarray(val), (mu, logvar), (mu.data, ev, batch))


@_rule("kl")
def _kl_bw(ctx, g):
    mu, ev, batch = ctx
    return g * mu / batch, g * 0.5 * (ev - 1.0) / batch


def reparameterize(mu: Tensor, logvar: Tensor, rng: np.random.Generator | None, train: bool = True) -> Tensor:
    """``mu + exp(logvar/2) * eps`` with eps ~ N(0,1) drawn from ``rng``; ``mu`` when not training."""
    if not train:
        return mu
    eps = rng.standard_normal(mu.shape)
    return add(mu, mul(exp(mul(logvar, 0.5)), eps))


def parameter(data) -> Tensor:
    return Tensor(data, requires_grad=True)
