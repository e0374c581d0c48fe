"""Minimal deterministic float64 tensor engine with reverse-mode autodiff.

Values live in numpy arrays. Every differentiable op appends a node to a
per-thread tape; ``backward`` walks the tape in reverse execution order
(always a valid topological order) and accumulates gradients into every
tensor that requires them. The tape is cleared after each backward pass.

Broadcasting is deliberately restricted: elementwise ops accept equal
shapes, a python scalar, or a right operand whose shape equals the left
operand's shape without the leading batch dimension. Anything else needs
an explicit reshape. Conditioning-style per-channel additions go through
the dedicated ``add_channel_bias`` op.
"""

from __future__ import annotations

import threading

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "NonFiniteError",
    "no_grad",
    "backward",
    "matmul",
    "conv2d",
    "relu",
    "silu",
    "sigmoid",
    "softplus",
    "concat",
    "embedding",
    "upsample2x",
    "add_channel_bias",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested op."""


class NonFiniteError(FloatingPointError):
    """An op produced NaN or Inf."""


class _Tape(threading.local):
    def __init__(self):
        self.nodes = []
        self.enabled = True


_TAPE = _Tape()


class no_grad:
    """Context manager that suspends tape recording (inference mode)."""

    def __enter__(self):
        self._prev = _TAPE.enabled
        _TAPE.enabled = False
        return self

    def __exit__(self, *exc):
        _TAPE.enabled = self._prev
        return False


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{op} produced non-finite values")


class Tensor:
    """N-dimensional float64 value with an optional gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.ascontiguousarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return _reshape(self, shape)

    def sum(self, axis: int | None = None) -> "Tensor":
        return _reduce(self, axis, kind="sum")

    def mean(self, axis: int | None = None) -> "Tensor":
        return _reduce(self, axis, kind="mean")

    def __add__(self, other):
        return _elementwise(self, other, kind="add")

    def __radd__(self, other):
        return _elementwise(self, other, kind="add")

    def __sub__(self, other):
        return _elementwise(self, other, kind="sub")

    def __rsub__(self, other):
        return _elementwise(self, other, kind="rsub")

    def __mul__(self, other):
        return _elementwise(self, other, kind="mul")

    def __rmul__(self, other):
        return _elementwise(self, other, kind="mul")

    def __neg__(self):
        return _elementwise(self, -1.0, kind="mul")

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def _make(value: np.ndarray, op: str, inputs: tuple, backward_fn) -> Tensor:
    """Wrap an op result, validating finiteness and recording on the tape."""
    _check_finite(value, op)
    out = Tensor(value)
    if _TAPE.enabled and any(
        isinstance(t, Tensor) and t.requires_grad for t in inputs
    ):
        out.requires_grad = True
        _TAPE.nodes.append((out, inputs, backward_fn))
    return out


def backward(loss: Tensor) -> None:
    """Reverse-accumulate gradients of a scalar loss through the tape."""
    if loss.size != 1:
        raise ShapeError(f"backward expects a scalar loss, got shape {loss.shape}")
    nodes = _TAPE.nodes
    _TAPE.nodes = []
    loss.grad = np.ones_like(loss.data)
    for out, inputs, fn in reversed(nodes):
        if out.grad is None:
            continue
        grads = fn(out.grad)
        for inp, g in zip(inputs, grads):
            if g is None or not isinstance(inp, Tensor) or not inp.requires_grad:
                continue
            if inp.grad is None:
                inp.grad = np.zeros_like(inp.data)
            inp.grad += g


# ---------------------------------------------------------------------------
# elementwise ops
# ---------------------------------------------------------------------------


def _broadcast_mode(a: Tensor, b) -> str:
    """'scalar', 'same', or 'batch' (b matches a minus the leading dim)."""
    if not isinstance(b, Tensor):
        return "scalar"
    if a.shape == b.shape:
        return "same"
    if a.ndim >= 1 and b.shape == a.shape[1:]:
        return "batch"
    raise ShapeError(f"incompatible shapes for elementwise op: {a.shape} vs {b.shape}")


def _elementwise(a: Tensor, b, kind: str) -> Tensor:
    mode = _broadcast_mode(a, b)
    bval = b.data if isinstance(b, Tensor) else float(b)
    if kind == "add":
        value = a.data + bval
    elif kind == "sub":
        value = a.data - bval
    elif kind == "rsub":
        value = bval - a.data
    elif kind == "mul":
        value = a.data * bval
    else:  # pragma: no cover
        raise ValueError(kind)

    def back(g):
        if kind == "add":
            ga, gb = g, g
        elif kind == "sub":
            ga, gb = g, -g
        elif kind == "rsub":
            ga, gb = -g, g
        else:  # mul
            ga = g * bval
            gb = g * a.data if mode != "scalar" else None
        if mode == "batch" and gb is not None:
            gb = gb.sum(axis=0)
        return (ga, gb) if mode != "scalar" else (ga, None)

    inputs = (a, b) if mode != "scalar" else (a,)
    return _make(value, kind, inputs, back)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-D matrix product (M,K) @ (K,N)."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul expects (M,K)@(K,N), got {a.shape} @ {b.shape}")
    value = a.data @ b.data

    def back(g):
        return g @ b.data.T, a.data.T @ g

    return _make(value, "matmul", (a, b), back)


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    # exp(-x) overflowing to inf yields exactly 0, which is the right limit
    with np.errstate(over="ignore"):
        return 1.0 / (1.0 + np.exp(-x))


def relu(x: Tensor) -> Tensor:
    value = np.maximum(x.data, 0.0)

    def back(g):
        return (g * (x.data > 0.0),)

    return _make(value, "relu", (x,), back)


def silu(x: Tensor) -> Tensor:
    s = _sigmoid_np(x.data)
    value = x.data * s

    def back(g):
        return (g * (s * (1.0 + x.data * (1.0 - s))),)

    return _make(value, "silu", (x,), back)


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid_np(x.data)

    def back(g):
        return (g * s * (1.0 - s),)

    return _make(s, "sigmoid", (x,), back)


def softplus(x: Tensor) -> Tensor:
    """log(1 + exp(x)), computed stably; gradient is sigmoid(x)."""
    value = np.logaddexp(0.0, x.data)

    def back(g):
        return (g * _sigmoid_np(x.data),)

    return _make(value, "softplus", (x,), back)


# ---------------------------------------------------------------------------
# reductions and shape ops
# ---------------------------------------------------------------------------


def _reduce(x: Tensor, axis: int | None, kind: str) -> Tensor:
    if axis is None:
        value = x.data.sum() if kind == "sum" else x.data.mean()
        count = x.size
    else:
        value = x.data.sum(axis=axis) if kind == "sum" else x.data.mean(axis=axis)
        count = x.shape[axis]
    scale = 1.0 if kind == "sum" else 1.0 / count

    def back(g):
        if axis is None:
            return (np.full_like(x.data, float(g.reshape(-1)[0]) * scale),)
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape) * scale,)

    return _make(np.asarray(value), kind, (x,), back)


def _reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    value = x.data.reshape(shape)

    def back(g):
        return (g.reshape(x.shape),)

    return _make(value, "reshape", (x,), back)


def concat(tensors: list[Tensor], axis: int = 0) -> Tensor:
    value = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, offsets, axis=axis))

    return _make(value, "concat", tuple(tensors), back)


def embedding(table: Tensor, idx: np.ndarray) -> Tensor:
    """Row lookup: table (V,D) indexed by integer idx (N,) -> (N,D)."""
    idx = np.asarray(idx, dtype=np.int64)
    if idx.ndim != 1 or table.ndim != 2:
        raise ShapeError(f"embedding expects 1-D indices into a 2-D table, got {idx.shape} into {table.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ShapeError(f"embedding index out of range for table of {table.shape[0]} rows")
    value = table.data[idx]

    def back(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx, g)
        return (gt,)

    return _make(value, "embedding", (table,), back)


def add_channel_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add a per-sample, per-channel bias (B,C) onto feature maps (B,C,...)."""
    if x.ndim < 2 or b.shape != x.shape[:2]:
        raise ShapeError(f"add_channel_bias expects bias (B,C) for input (B,C,...), got {b.shape} for {x.shape}")
    extra = (1,) * (x.ndim - 2)
    value = x.data + b.data.reshape(b.shape + extra)
    trailing = tuple(range(2, x.ndim))

    def back(g):
        gb = g.sum(axis=trailing) if trailing else g
        return g, gb

    return _make(value, "add_channel_bias", (x, b), back)


def upsample2x(x: Tensor) -> Tensor:
    """Nearest-neighbour 2x spatial upsampling of (B,C,H,W)."""
    if x.ndim != 4:
        raise ShapeError(f"upsample2x expects (B,C,H,W), got {x.shape}")
    value = x.data.repeat(2, axis=2).repeat(2, axis=3)
    B, C, H, W = x.shape

    def back(g):
        return (g.reshape(B, C, H, 2, W, 2).sum(axis=(3, 5)),)

    return _make(value, "upsample2x", (x,), back)


# ---------------------------------------------------------------------------
# 2-D convolution (im2col)
# ---------------------------------------------------------------------------


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, hout: int, wout: int) -> np.ndarray:
    B, C, _, _ = xp.shape
    windows = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    windows = windows[:, :, ::stride, ::stride]  # (B, C, hout, wout, kh, kw)
    cols = windows.transpose(0, 1, 4, 5, 2, 3)
    return cols.reshape(B, C * kh * kw, hout * wout)


def _col2im(cols: np.ndarray, padded_shape, kh, kw, stride, hout, wout) -> np.ndarray:
    B, C, Hp, Wp = padded_shape
    xg = np.zeros((B, C, Hp, Wp), dtype=np.float64)
    cols = cols.reshape(B, C, kh, kw, hout, wout)
    for i in range(kh):
        for j in range(kw):
            xg[:, :, i : i + stride * hout : stride, j : j + stride * wout : stride] += cols[:, :, i, j]
    return xg


def conv2d(x: Tensor, w: Tensor, bias: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D convolution of (B,Cin,H,W) with kernels (Cout,Cin,KH,KW)."""
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and kernel, got {x.shape} and {w.shape}")
    B, Cin, H, W = x.shape
    Cout, Cin_w, KH, KW = w.shape
    if Cin != Cin_w:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape} vs kernel {w.shape}")
    if bias is not None and bias.shape != (Cout,):
        raise ShapeError(f"conv2d bias must be ({Cout},), got {bias.shape}")
    hout = (H + 2 * pad - KH) // stride + 1
    wout = (W + 2 * pad - KW) // stride + 1
    if hout < 1 or wout < 1:
        raise ShapeError(f"conv2d output would be empty for input {x.shape}, kernel {w.shape}, stride {stride}, pad {pad}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    cols = _im2col(xp, KH, KW, stride, hout, wout)
    w2 = w.data.reshape(Cout, -1)
    out = np.matmul(w2, cols)  # (B, Cout, hout*wout)
    if bias is not None:
        out = out + bias.data.reshape(1, Cout, 1)
    value = out.reshape(B, Cout, hout, wout)

    def back(g):
        gf = g.reshape(B, Cout, hout * wout)
        ckk = Cin * KH * KW
        l = hout * wout
        gw = (
            gf.transpose(1, 0, 2).reshape(Cout, B * l) @ cols.transpose(0, 2, 1).reshape(B * l, ckk)
        ).reshape(w.shape)
        gcols = np.matmul(w2.T, gf)
        gx = _col2im(gcols, (B, Cin, H + 2 * pad, W + 2 * pad), KH, KW, stride, hout, wout)
        if pad:
            gx = gx[:, :, pad:-pad, pad:-pad]
        gb = gf.sum(axis=(0, 2)) if bias is not None else None
        return gx, gw, gb

    inputs = (x, w, bias) if bias is not None else (x, w)

    def back_nobias(g):
        gx, gw, _ = back(g)
        return gx, gw

    return _make(value, "conv2d", inputs, back if bias is not None else back_nobias)
