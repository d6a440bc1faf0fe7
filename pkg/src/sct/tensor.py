"""Dense-tensor numerical core with reverse-mode autodiff.

Just enough machinery for the codec: elementwise arithmetic, sigmoid/tanh,
2-D convolution with zero same-padding, convolutional LSTM steps,
depth-to-space shuffling and straight-through binarization. Arrays are
channels-last (H, W, C), float32 by default; float64 exists for gradient
checking, where finite differences are actually meaningful.

All ops are deterministic: fixed reduction order, no threading of our own.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass

import numpy as np

DEFAULT_DTYPE = np.float32


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested op."""


class GraphError(RuntimeError):
    """Backward called on a non-scalar or an already-freed graph."""


_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block (inference fast path)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """N-d array plus optional gradient buffer and backward closure."""

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None
        self._freed = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"

    # -- operator sugar ----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def backward(self, retain_graph=False):
        """Reverse-mode sweep from a scalar loss.

        The graph is freed afterwards unless retain_graph; a second backward
        through freed nodes raises GraphError.
        """
        if self.data.size != 1:
            raise GraphError(f"backward requires a scalar loss, got shape {self.shape}")
        if self._freed:
            raise GraphError("backward through a freed graph; pass retain_graph=True to reuse it")

        topo = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))

        for node in topo:
            # Interior nodes restart from zero each pass; leaf grads accumulate.
            if node._backward is not None or node.grad is None:
                node.grad = np.zeros_like(node.data)
        self.grad = np.ones_like(self.data)

        for node in reversed(topo):
            if node._backward is not None:
                if node._freed:
                    raise GraphError("backward through a freed graph; pass retain_graph=True to reuse it")
                node._backward()
                if not retain_graph:
                    node._backward = None
                    node._parents = ()
                    node._freed = True


def _needs_graph(*tensors):
    return _grad_enabled and any(t.requires_grad for t in tensors)


def _make(data, parents, backward_fn):
    out = Tensor(data)
    if _needs_graph(*parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def tensor(data, requires_grad=False, dtype=None):
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def zeros(shape, dtype=DEFAULT_DTYPE, requires_grad=False):
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=requires_grad)


def full(shape, value, dtype=DEFAULT_DTYPE):
    return Tensor(np.full(shape, value, dtype=dtype))


def _coerce(x, like):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


def _binary_shapes(a, b, opname):
    if a.shape == b.shape:
        return
    if a.data.size == 1 or b.data.size == 1:
        return
    raise ShapeError(f"{opname}: shape mismatch {a.shape} vs {b.shape}")


def _reduce_to(g, shape):
    # Sum a broadcast gradient back down to a size-1 operand.
    if g.shape == shape:
        return g
    return np.sum(g).reshape(shape) if shape else np.asarray(np.sum(g))


def add(a, b):
    a = a if isinstance(a, Tensor) else Tensor(a)
    b = _coerce(b, a)
    _binary_shapes(a, b, "add")
    out_data = a.data + b.data

    def _bw():
        if a.requires_grad:
            a.grad += _reduce_to(out.grad, a.data.shape)
        if b.requires_grad:
            b.grad += _reduce_to(out.grad, b.data.shape)

    out = _make(out_data, (a, b), _bw)
    return out


def sub(a, b):
    a = a if isinstance(a, Tensor) else Tensor(a)
    b = _coerce(b, a)
    _binary_shapes(a, b, "sub")
    out_data = a.data - b.data

    def _bw():
        if a.requires_grad:
            a.grad += _reduce_to(out.grad, a.data.shape)
        if b.requires_grad:
            b.grad -= _reduce_to(out.grad, b.data.shape)

    out = _make(out_data, (a, b), _bw)
    return out


def mul(a, b):
    a = a if isinstance(a, Tensor) else Tensor(a)
    b = _coerce(b, a)
    _binary_shapes(a, b, "mul")
    out_data = a.data * b.data

    def _bw():
        if a.requires_grad:
            a.grad += _reduce_to(out.grad * b.data, a.data.shape)
        if b.requires_grad:
            b.grad += _reduce_to(out.grad * a.data, b.data.shape)

    out = _make(out_data, (a, b), _bw)
    return out


def scale(a, c):
    """Multiply by a constant scalar or array (no gradient into c)."""
    c = np.asarray(c, dtype=a.dtype)
    if c.ndim and c.shape != a.shape:
        raise ShapeError(f"scale: constant shape {c.shape} vs tensor {a.shape}")
    out_data = a.data * c

    def _bw():
        if a.requires_grad:
            a.grad += out.grad * c

    out = _make(out_data, (a,), _bw)
    return out


def absolute(a):
    # Subgradient at 0 is defined as 0 (np.sign convention).
    out_data = np.abs(a.data)

    def _bw():
        if a.requires_grad:
            a.grad += out.grad * np.sign(a.data)

    out = _make(out_data, (a,), _bw)
    return out


def tsum(a):
    out_data = np.asarray(a.data.sum(), dtype=a.dtype)

    def _bw():
        if a.requires_grad:
            a.grad += out.grad

    out = _make(out_data, (a,), _bw)
    return out


def tmean(a):
    n = a.data.size
    out_data = np.asarray(a.data.sum() / n, dtype=a.dtype)

    def _bw():
        if a.requires_grad:
            a.grad += out.grad / n

    out = _make(out_data, (a,), _bw)
    return out


def sigmoid(a):
    # Stable two-branch form; exp overflow would poison gradients.
    x = a.data
    out_data = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                        np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x)))).astype(a.dtype)

    def _bw():
        if a.requires_grad:
            a.grad += out.grad * (out_data * (1.0 - out_data))

    out = _make(out_data, (a,), _bw)
    return out


def tanh(a):
    out_data = np.tanh(a.data)

    def _bw():
        if a.requires_grad:
            a.grad += out.grad * (1.0 - out_data * out_data)

    out = _make(out_data, (a,), _bw)
    return out


def concat_channels(parts):
    """Concatenate (H, W, Ci) tensors along the channel axis."""
    h, w = parts[0].shape[:2]
    for p in parts:
        if p.data.ndim != 3 or p.shape[:2] != (h, w):
            raise ShapeError(f"concat_channels: incompatible shape {p.shape}")
    out_data = np.concatenate([p.data for p in parts], axis=2)
    splits = np.cumsum([p.shape[2] for p in parts])[:-1]

    def _bw():
        pieces = np.split(out.grad, splits, axis=2)
        for p, g in zip(parts, pieces):
            if p.requires_grad:
                p.grad += g

    out = _make(out_data, tuple(parts), _bw)
    return out


def channel_slice(a, start, stop):
    if a.data.ndim != 3:
        raise ShapeError(f"channel_slice expects (H, W, C), got {a.shape}")
    out_data = a.data[:, :, start:stop].copy()

    def _bw():
        if a.requires_grad:
            a.grad[:, :, start:stop] += out.grad

    out = _make(out_data, (a,), _bw)
    return out


def straight_through(analog, values):
    """Forward the given hard values, backward the identity onto analog."""
    values = np.asarray(values, dtype=analog.dtype)
    if values.shape != analog.shape:
        raise ShapeError(f"straight_through: values {values.shape} vs analog {analog.shape}")

    def _bw():
        if analog.requires_grad:
            analog.grad += out.grad

    out = _make(values, (analog,), _bw)
    return out


# -- convolution ----------------------------------------------------------

@dataclass(frozen=True)
class ConvSpec:
    """Kernel geometry: height x width x out-channels / stride."""
    kernel_h: int
    kernel_w: int
    out_channels: int
    stride: int

    def __post_init__(self):
        for name in ("kernel_h", "kernel_w", "out_channels", "stride"):
            if getattr(self, name) < 1:
                raise ValueError(f"ConvSpec.{name} must be >= 1")


def _same_extent(size, kernel, stride):
    out = -(-size // stride)
    pad = max((out - 1) * stride + kernel - size, 0)
    return out, pad // 2, pad - pad // 2


def _im2col(xp, kh, kw, stride, out_h, out_w):
    cols = np.empty((out_h, out_w, kh, kw, xp.shape[2]), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j, :] = xp[i:i + stride * out_h:stride, j:j + stride * out_w:stride, :]
    return cols


def conv2d(x, weights, bias, spec):
    """2-D convolution, zero same-padding, channels-last.

    x: (H, W, Cin); weights: (kH, kW, Cin, Cout); bias: (Cout,) or None.
    Output spatial extents are ceil(H/S) x ceil(W/S).
    """
    if x.data.ndim != 3:
        raise ShapeError(f"conv2d input must be (H, W, Cin), got {x.shape}")
    kh, kw, cin, cout = weights.shape
    if (kh, kw, cout) != (spec.kernel_h, spec.kernel_w, spec.out_channels):
        raise ShapeError(f"conv2d weights {weights.shape} do not match spec {spec}")
    if x.shape[2] != cin:
        raise ShapeError(f"conv2d: input has {x.shape[2]} channels, weights expect {cin}")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"conv2d bias must be ({cout},), got {bias.shape}")

    h, w = x.shape[:2]
    s = spec.stride
    out_h, pt, pb = _same_extent(h, kh, s)
    out_w, pl, pr = _same_extent(w, kw, s)

    xp = np.zeros((h + pt + pb, w + pl + pr, cin), dtype=x.dtype)
    xp[pt:pt + h, pl:pl + w, :] = x.data
    cols = _im2col(xp, kh, kw, s, out_h, out_w)
    flat = cols.reshape(out_h * out_w, kh * kw * cin)
    y = flat @ weights.data.reshape(kh * kw * cin, cout)
    if bias is not None:
        y = y + bias.data
    out_data = y.reshape(out_h, out_w, cout)

    parents = (x, weights) if bias is None else (x, weights, bias)

    def _bw():
        gy = out.grad.reshape(out_h * out_w, cout)
        if x.requires_grad:
            dcols = (gy @ weights.data.reshape(kh * kw * cin, cout).T)
            dcols = dcols.reshape(out_h, out_w, kh, kw, cin)
            dxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    dxp[i:i + s * out_h:s, j:j + s * out_w:s, :] += dcols[:, :, i, j, :]
            x.grad += dxp[pt:pt + h, pl:pl + w, :]
        if weights.requires_grad:
            weights.grad += (flat.T @ gy).reshape(weights.shape)
        if bias is not None and bias.requires_grad:
            bias.grad += gy.sum(axis=0)

    out = _make(out_data, parents, _bw)
    return out


# -- convolutional LSTM ---------------------------------------------------

@dataclass
class ConvLstmState:
    """Hidden/cell maps of one convolutional LSTM layer."""
    hidden: Tensor
    cell: Tensor

    def __post_init__(self):
        if self.hidden.shape != self.cell.shape:
            raise ShapeError(f"LSTM state: hidden {self.hidden.shape} != cell {self.cell.shape}")


def conv_lstm_step(x, state, wx, wh, bias, spec):
    """One ConvLSTM step: stride-S input conv plus stride-1 hidden conv.

    Gate channel order in wx/wh/bias is input, forget, output, candidate.
    Returns (new_hidden, new_state); new_hidden is the layer output.
    """
    nh = state.hidden.shape[2]
    gate_spec = ConvSpec(spec.kernel_h, spec.kernel_w, 4 * nh, spec.stride)
    hidden_spec = ConvSpec(spec.kernel_h, spec.kernel_w, 4 * nh, 1)
    gates_x = conv2d(x, wx, bias, gate_spec)
    if gates_x.shape[:2] != state.hidden.shape[:2]:
        raise ShapeError(
            f"conv_lstm_step: input maps to {gates_x.shape[:2]}, state is {state.hidden.shape[:2]}")
    gates = add(gates_x, conv2d(state.hidden, wh, None, hidden_spec))

    i = sigmoid(channel_slice(gates, 0, nh))
    f = sigmoid(channel_slice(gates, nh, 2 * nh))
    o = sigmoid(channel_slice(gates, 2 * nh, 3 * nh))
    g = tanh(channel_slice(gates, 3 * nh, 4 * nh))

    cell = add(mul(f, state.cell), mul(i, g))
    hidden = mul(o, tanh(cell))
    return hidden, ConvLstmState(hidden=hidden, cell=cell)


# -- depth/space shuffles -------------------------------------------------

def depth_to_space(a, block):
    """(H, W, C) -> (H*b, W*b, C/b^2), row-major within each block."""
    if a.data.ndim != 3:
        raise ShapeError(f"depth_to_space expects (H, W, C), got {a.shape}")
    h, w, c = a.shape
    b = int(block)
    if b < 1 or c % (b * b) != 0:
        raise ShapeError(f"depth_to_space: {c} channels not divisible by block^2 = {b * b}")
    cout = c // (b * b)
    out_data = (a.data.reshape(h, w, b, b, cout)
                .transpose(0, 2, 1, 3, 4)
                .reshape(h * b, w * b, cout))

    def _bw():
        if a.requires_grad:
            a.grad += (out.grad.reshape(h, b, w, b, cout)
                       .transpose(0, 2, 1, 3, 4)
                       .reshape(h, w, c))

    out = _make(np.ascontiguousarray(out_data), (a,), _bw)
    return out


def space_to_depth(a, block):
    """Inverse of depth_to_space."""
    if a.data.ndim != 3:
        raise ShapeError(f"space_to_depth expects (H, W, C), got {a.shape}")
    hb, wb, c = a.shape
    b = int(block)
    if b < 1 or hb % b != 0 or wb % b != 0:
        raise ShapeError(f"space_to_depth: extents {hb}x{wb} not divisible by block {b}")
    h, w = hb // b, wb // b
    out_data = (a.data.reshape(h, b, w, b, c)
                .transpose(0, 2, 1, 3, 4)
                .reshape(h, w, b * b * c))

    def _bw():
        if a.requires_grad:
            a.grad += (out.grad.reshape(h, w, b, b, c)
                       .transpose(0, 2, 1, 3, 4)
                       .reshape(hb, wb, c))

    out = _make(np.ascontiguousarray(out_data), (a,), _bw)
    return out
