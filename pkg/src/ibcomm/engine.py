"""Minimal dense-tensor engine with reverse-mode automatic differentiation.

Tensors are immutable numpy arrays (float64) linked into a dynamically
built computation graph. Every op records a vector-Jacobian product
closure; ``backward`` runs a single reverse topological sweep.

Layout is row-major, channels-first (C, H, W) throughout.
"""

from __future__ import annotations

import struct

import numpy as np


class ShapeError(ValueError):
    """Input shapes are inconsistent with an operation's shape rule."""


class Tensor:
    """Node in the computation graph.

    ``data`` is a float64 ndarray. ``parents`` are the input tensors and
    ``vjp`` maps the output gradient to one gradient per parent.
    """

    __slots__ = ("data", "parents", "vjp", "op")

    def __init__(self, data, parents=(), vjp=None, op=None):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr if arr.flags.c_contiguous else np.ascontiguousarray(arr)
        self.parents = tuple(parents)
        self.vjp = vjp
        self.op = op

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op!r})"


def constant(data):
    """Wrap an array as a leaf tensor."""
    return Tensor(np.asarray(data, dtype=np.float64), op="const")


def _check(cond, op, msg):
    if not cond:
        raise ShapeError(f"{op}: {msg}")


# ---------------------------------------------------------------------------
# convolution primitives
# ---------------------------------------------------------------------------

def _im2col(xp, kh, kw, stride, ho, wo):
    cin = xp.shape[0]
    cols = np.empty((cin, kh, kw, ho, wo), dtype=np.float64)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xp[:, i:i + stride * ho:stride, j:j + stride * wo:stride]
    return cols


def conv2d(x, w, b=None, stride=1, padding=None):
    """2-D convolution on a (C, H, W) input with an (O, C, kh, kw) kernel.

    ``padding=None`` means zero padding of kh//2 ("same" size at stride 1).
    """
    _check(x.data.ndim == 3, "conv2d", f"input must be (C,H,W), got {x.shape}")
    _check(w.data.ndim == 4, "conv2d", f"kernel must be (O,C,kh,kw), got {w.shape}")
    cin, h, wd = x.shape
    cout, cink, kh, kw = w.shape
    _check(cin == cink, "conv2d", f"input channels {cin} != kernel channels {cink}")
    p = kh // 2 if padding is None else int(padding)
    ho = (h + 2 * p - kh) // stride + 1
    wo = (wd + 2 * p - kw) // stride + 1
    _check(ho >= 1 and wo >= 1, "conv2d", f"output dims {ho}x{wo} degenerate")
    if b is not None:
        _check(b.shape == (cout,), "conv2d", f"bias shape {b.shape} != ({cout},)")

    xp = np.pad(x.data, ((0, 0), (p, p), (p, p)))
    cols = _im2col(xp, kh, kw, stride, ho, wo)
    wmat = w.data.reshape(cout, cin * kh * kw)
    out = (wmat @ cols.reshape(cin * kh * kw, ho * wo)).reshape(cout, ho, wo)
    if b is not None:
        out = out + b.data[:, None, None]

    def vjp(g):
        gmat = g.reshape(cout, ho * wo)
        dw = (gmat @ cols.reshape(cin * kh * kw, ho * wo).T).reshape(w.shape)
        dcols = (wmat.T @ gmat).reshape(cin, kh, kw, ho, wo)
        dxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                dxp[:, i:i + stride * ho:stride, j:j + stride * wo:stride] += dcols[:, i, j]
        dx = dxp[:, p:p + h, p:p + wd] if p else dxp
        if b is not None:
            return dx, dw, g.sum(axis=(1, 2))
        return dx, dw

    parents = (x, w) if b is None else (x, w, b)
    return Tensor(out, parents, vjp, op="conv2d")


def conv_transpose2d(x, w, b=None, stride=2, padding=1):
    """Transposed convolution; (C, H, W) input, (C, O, k, k) kernel.

    With kernel 4, stride 2, padding 1 the spatial dims exactly double.
    """
    _check(x.data.ndim == 3, "conv_transpose2d", f"input must be (C,H,W), got {x.shape}")
    _check(w.data.ndim == 4, "conv_transpose2d", f"kernel must be (C,O,k,k), got {w.shape}")
    cin, h, wd = x.shape
    cink, cout, kh, kw = w.shape
    _check(cin == cink, "conv_transpose2d", f"input channels {cin} != kernel channels {cink}")
    p = int(padding)
    ho = (h - 1) * stride - 2 * p + kh
    wo = (wd - 1) * stride - 2 * p + kw
    _check(ho >= 1 and wo >= 1, "conv_transpose2d", f"output dims {ho}x{wo} degenerate")
    if b is not None:
        _check(b.shape == (cout,), "conv_transpose2d", f"bias shape {b.shape} != ({cout},)")

    wmat = w.data.reshape(cin, cout * kh * kw)
    contrib = (wmat.T @ x.data.reshape(cin, h * wd)).reshape(cout, kh, kw, h, wd)
    full = np.zeros((cout, (h - 1) * stride + kh, (wd - 1) * stride + kw), dtype=np.float64)
    for i in range(kh):
        for j in range(kw):
            full[:, i:i + stride * h:stride, j:j + stride * wd:stride] += contrib[:, i, j]
    out = full[:, p:p + ho, p:p + wo] if p else full
    if b is not None:
        out = out + b.data[:, None, None]

    def vjp(g):
        gfull = np.pad(g, ((0, 0), (p, p), (p, p)))
        dcontrib = np.empty_like(contrib)
        for i in range(kh):
            for j in range(kw):
                dcontrib[:, i, j] = gfull[:, i:i + stride * h:stride, j:j + stride * wd:stride]
        dmat = dcontrib.reshape(cout * kh * kw, h * wd)
        dx = (wmat @ dmat).reshape(x.shape)
        dw = (x.data.reshape(cin, h * wd) @ dmat.T).reshape(w.shape)
        if b is not None:
            return dx, dw, g.sum(axis=(1, 2))
        return dx, dw

    parents = (x, w) if b is None else (x, w, b)
    return Tensor(out, parents, vjp, op="conv_transpose2d")


# ---------------------------------------------------------------------------
# dense / activation / pooling primitives
# ---------------------------------------------------------------------------

def fully_connected(x, w, b=None):
    """Affine map w @ x + b for a 1-D input."""
    _check(x.data.ndim == 1, "fully_connected", f"input must be 1-D, got {x.shape}")
    _check(w.data.ndim == 2, "fully_connected", f"weight must be 2-D, got {w.shape}")
    m, n = w.shape
    _check(n == x.size, "fully_connected", f"weight columns {n} != input length {x.size}")
    if b is not None:
        _check(b.shape == (m,), "fully_connected", f"bias shape {b.shape} != ({m},)")
    out = w.data @ x.data
    if b is not None:
        out = out + b.data

    def vjp(g):
        dx = w.data.T @ g
        dw = np.outer(g, x.data)
        if b is not None:
            return dx, dw, g.copy()
        return dx, dw

    parents = (x, w) if b is None else (x, w, b)
    return Tensor(out, parents, vjp, op="fully_connected")


def relu(x):
    mask = x.data > 0
    return Tensor(x.data * mask, (x,), lambda g: (g * mask,), op="relu")


def sigmoid(x):
    pos = x.data >= 0
    out = np.empty_like(x.data)
    out[pos] = 1.0 / (1.0 + np.exp(-x.data[pos]))
    ex = np.exp(x.data[~pos])
    out[~pos] = ex / (1.0 + ex)
    return Tensor(out, (x,), lambda g: (g * out * (1.0 - out),), op="sigmoid")


def adaptive_max_pool(x, out_hw=(4, 4)):
    """Max pooling onto a fixed output grid; bins partition H and W evenly.

    Ties within a bin resolve to the first element in row-major order.
    """
    _check(x.data.ndim == 3, "adaptive_max_pool", f"input must be (C,H,W), got {x.shape}")
    c, h, w = x.shape
    oh, ow = out_hw
    out = np.empty((c, oh, ow), dtype=np.float64)
    argidx = np.empty((c, oh, ow), dtype=np.int64)
    hb = [(i * h // oh, -(-(i + 1) * h // oh)) for i in range(oh)]
    wb = [(j * w // ow, -(-(j + 1) * w // ow)) for j in range(ow)]
    for i, (h0, h1) in enumerate(hb):
        for j, (w0, w1) in enumerate(wb):
            block = x.data[:, h0:h1, w0:w1].reshape(c, -1)
            k = block.argmax(axis=1)
            out[:, i, j] = block[np.arange(c), k]
            bw = w1 - w0
            argidx[:, i, j] = (h0 + k // bw) * w + (w0 + k % bw)

    def vjp(g):
        dx = np.zeros(c * h * w, dtype=np.float64)
        flatarg = argidx.reshape(c, -1) + (np.arange(c) * h * w)[:, None]
        np.add.at(dx, flatarg.ravel(), g.reshape(c, -1).ravel())
        return (dx.reshape(x.shape),)

    return Tensor(out, (x,), vjp, op="adaptive_max_pool")


# ---------------------------------------------------------------------------
# elementwise / structural primitives
# ---------------------------------------------------------------------------

def add(x, y):
    _check(x.shape == y.shape, "elementwise_add", f"shapes {x.shape} vs {y.shape}")
    return Tensor(x.data + y.data, (x, y), lambda g: (g, g), op="elementwise_add")


def sub(x, y):
    _check(x.shape == y.shape, "elementwise_sub", f"shapes {x.shape} vs {y.shape}")
    return Tensor(x.data - y.data, (x, y), lambda g: (g, -g), op="elementwise_sub")


def mul(x, y):
    _check(x.shape == y.shape, "elementwise_mul", f"shapes {x.shape} vs {y.shape}")
    return Tensor(x.data * y.data, (x, y),
                  lambda g: (g * y.data, g * x.data), op="elementwise_mul")


def scale(x, c):
    c = float(c)
    return Tensor(x.data * c, (x,), lambda g: (g * c,), op="scale")


def add_scalar(x, c):
    c = float(c)
    return Tensor(x.data + c, (x,), lambda g: (g,), op="add_scalar")


def mul_const(x, arr):
    """Elementwise product with a non-differentiable constant array."""
    arr = np.asarray(arr, dtype=np.float64)
    _check(x.shape == arr.shape, "mul_const", f"shapes {x.shape} vs {arr.shape}")
    return Tensor(x.data * arr, (x,), lambda g: (g * arr,), op="mul_const")


def maximum(x, y):
    """Elementwise max; on ties the gradient routes to the first argument."""
    _check(x.shape == y.shape, "maximum", f"shapes {x.shape} vs {y.shape}")
    takex = x.data >= y.data
    return Tensor(np.where(takex, x.data, y.data), (x, y),
                  lambda g: (g * takex, g * ~takex), op="maximum")


def log(x):
    return Tensor(np.log(x.data), (x,), lambda g: (g / x.data,), op="log")


def exp(x):
    out = np.exp(x.data)
    return Tensor(out, (x,), lambda g: (g * out,), op="exp")


def sum_all(x):
    return Tensor(np.float64(x.data.sum()), (x,),
                  lambda g: (np.full(x.shape, g, dtype=np.float64),), op="sum")


def concat_channels(tensors):
    _check(len(tensors) >= 1, "concat_channels", "need at least one input")
    hw = tensors[0].shape[1:]
    for t in tensors:
        _check(t.data.ndim == 3 and t.shape[1:] == hw, "concat_channels",
               f"spatial dims differ: {t.shape} vs (*, {hw})")
    out = np.concatenate([t.data for t in tensors], axis=0)
    splits = np.cumsum([t.shape[0] for t in tensors])[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=0))

    return Tensor(out, tuple(tensors), vjp, op="concat_channels")


def reshape(x, shape):
    shape = tuple(int(s) for s in shape)
    _check(int(np.prod(shape)) == x.size, "reshape",
           f"cannot reshape {x.shape} to {shape}")
    return Tensor(x.data.reshape(shape), (x,),
                  lambda g: (g.reshape(x.shape),), op="reshape")


def broadcast_scale(x, m):
    """Multiply a (C, H, W) tensor by a (1, H, W) mask, broadcast over channels."""
    _check(x.data.ndim == 3, "broadcast_scale", f"input must be (C,H,W), got {x.shape}")
    _check(m.data.ndim == 3 and m.shape[0] == 1 and m.shape[1:] == x.shape[1:],
           "broadcast_scale", f"mask shape {m.shape} incompatible with {x.shape}")
    return Tensor(x.data * m.data, (x, m),
                  lambda g: (g * m.data, (g * x.data).sum(axis=0, keepdims=True)),
                  op="broadcast_scale")


def gather(x, indices):
    """Pick entries of a 1-D tensor at fixed (constant) indices."""
    _check(x.data.ndim == 1, "gather", f"input must be 1-D, got {x.shape}")
    idx = np.asarray(indices, dtype=np.int64)

    def vjp(g):
        dx = np.zeros(x.shape, dtype=np.float64)
        np.add.at(dx, idx, g)
        return (dx,)

    return Tensor(x.data[idx], (x,), vjp, op="gather")


def scatter(values, indices, size):
    """Place a 1-D tensor of values at fixed indices of a zero vector."""
    _check(values.data.ndim == 1, "scatter", f"values must be 1-D, got {values.shape}")
    idx = np.asarray(indices, dtype=np.int64)
    _check(len(idx) == values.size, "scatter",
           f"{len(idx)} indices vs {values.size} values")
    out = np.zeros(int(size), dtype=np.float64)
    out[idx] = values.data
    return Tensor(out, (values,), lambda g: (g[idx],), op="scatter")


# ---------------------------------------------------------------------------
# public primitive dispatch
# ---------------------------------------------------------------------------

_PRIMITIVES = {
    "conv2d": conv2d,
    "conv_transpose2d": conv_transpose2d,
    "fully_connected": fully_connected,
    "relu": relu,
    "sigmoid": sigmoid,
    "adaptive_max_pool": adaptive_max_pool,
    "elementwise_add": add,
    "elementwise_mul": mul,
    "concat_channels": concat_channels,
    "reshape": reshape,
    "broadcast_scale": broadcast_scale,
}


def apply_primitive(kind, inputs, attrs=None):
    """Apply a named primitive to a list of input tensors."""
    if kind not in _PRIMITIVES:
        raise ShapeError(f"unknown primitive {kind!r}")
    fn = _PRIMITIVES[kind]
    attrs = dict(attrs or {})
    if kind in ("concat_channels",):
        return fn(list(inputs), **attrs)
    if kind in ("reshape",):
        return fn(inputs[0], attrs["shape"])
    return fn(*inputs, **attrs)


# ---------------------------------------------------------------------------
# reverse sweep
# ---------------------------------------------------------------------------

def backward(loss, wrt=None):
    """Reverse-mode sweep from a scalar loss.

    Returns a dict mapping every reached Tensor to its gradient array.
    Tensors listed in ``wrt`` but unreachable from the loss get zeros.
    """
    if loss.data.ndim != 0:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    order = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))

    grads = {loss: np.float64(1.0)}
    for node in reversed(order):
        g = grads.get(node)
        if g is None or node.vjp is None:
            continue
        for parent, pg in zip(node.parents, node.vjp(g)):
            if parent in grads:
                grads[parent] = grads[parent] + pg
            else:
                grads[parent] = pg
    if wrt is not None:
        for t in wrt:
            if t not in grads:
                grads[t] = np.zeros(t.shape, dtype=np.float64)
    return grads


class Graph:
    """Named trainable parameters plus the reverse sweep over them."""

    def __init__(self):
        self.parameters = {}

    def parameter(self, name, value):
        if name in self.parameters:
            raise ValueError(f"duplicate parameter {name!r}")
        t = Tensor(np.asarray(value, dtype=np.float64), op="param")
        self.parameters[name] = t
        return t

    def grads(self, loss):
        """Gradient per parameter name; zeros for parameters the loss never touches."""
        gmap = backward(loss, wrt=self.parameters.values())
        return {name: gmap[t] for name, t in self.parameters.items()}

    def state(self):
        return {name: t.data.copy() for name, t in self.parameters.items()}

    def load_state(self, state):
        for name, t in self.parameters.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != t.shape:
                raise ShapeError(f"parameter {name!r}: shape {arr.shape} != {t.shape}")
            t.data = np.ascontiguousarray(arr)


# ---------------------------------------------------------------------------
# checkpoint container
# ---------------------------------------------------------------------------

_CKPT_MAGIC = b"ICKP"
_CKPT_VERSION = 1


def save_checkpoint(state, path):
    """Write named tensors to the flat binary checkpoint container."""
    with open(path, "wb") as f:
        f.write(_CKPT_MAGIC)
        f.write(struct.pack("<H", _CKPT_VERSION))
        for name in state:
            arr = np.asarray(state[name], dtype=np.float64)
            nb = name.encode("utf-8")
            f.write(struct.pack("<H", len(nb)))
            f.write(nb)
            f.write(struct.pack("<B", arr.ndim))
            for d in arr.shape:
                f.write(struct.pack("<I", d))
            f.write(arr.astype("<f8").tobytes())


def load_checkpoint(path):
    """Read a checkpoint container back into a name -> ndarray dict."""
    state = {}
    with open(path, "rb") as f:
        if f.read(4) != _CKPT_MAGIC:
            raise ValueError("not a checkpoint file (bad magic)")
        (version,) = struct.unpack("<H", f.read(2))
        if version != _CKPT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        while True:
            hdr = f.read(2)
            if not hdr:
                break
            (nlen,) = struct.unpack("<H", hdr)
            name = f.read(nlen).decode("utf-8")
            (rank,) = struct.unpack("<B", f.read(1))
            shape = struct.unpack(f"<{rank}I", f.read(4 * rank)) if rank else ()
            count = int(np.prod(shape)) if rank else 1
            data = np.frombuffer(f.read(8 * count), dtype="<f8")
            state[name] = data.reshape(shape).copy()
    return state
