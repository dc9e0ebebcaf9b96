"""Dense tensors, the operator set used by the deraining network, and
reverse-mode automatic differentiation on a gradient tape.

Feature maps are 4-D (batch, channels, height, width) arrays; parameters may
carry any rank. Training runs in float32, gradient verification in float64.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "NumericsError",
    "GradTape",
    "no_grad",
    "grad_enabled",
    "clear_tape",
    "record_kinks",
    "ConvParams",
    "BatchNormParams",
    "conv2d",
    "avg_pool",
    "upsample_bilinear",
    "leaky_relu",
    "sigmoid",
    "batch_norm",
    "concat_channels",
    "slice_channels",
    "add",
    "sub",
    "mul",
    "div",
    "abs_val",
    "scale",
    "add_array",
    "mul_array",
    "sum_all",
    "mean_all",
    "reshape",
    "permute_channels",
    "tile_channels",
    "repeat_channel_blocks",
    "sum_channel_groups",
    "neighbor_stack",
    "softmax_over_positions",
    "backward",
    "interp_matrix",
]


class ShapeError(ValueError):
    """Raised when operand shapes violate an operation's contract."""


class NumericsError(RuntimeError):
    """Raised on non-finite values where finiteness is required."""


class GradTape:
    """Ordered record of executed operations, replayed once in reverse.

    Each record holds the output tensor, the input tensors, and a closure
    mapping the output adjoint to per-input adjoints.
    """

    def __init__(self):
        self.records = []

    def clear(self):
        self.records.clear()

    def __len__(self):
        return len(self.records)


_tape = GradTape()
_grad_enabled = True


def grad_enabled() -> bool:
    return _grad_enabled


def clear_tape():
    """Drop recorded operations without running backward (abandoned graphs)."""
    _tape.clear()


_kink_trace = None


@contextlib.contextmanager
def record_kinks(log: list):
    """Collect the branch pattern of every kinked op (leaky_relu, abs) executed
    in the block. Two runs with differing patterns bracket a non-smooth point,
    which invalidates a finite-difference interval across them."""
    global _kink_trace
    prev = _kink_trace
    _kink_trace = log
    try:
        yield log
    finally:
        _kink_trace = prev


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (inference / numeric probes)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """A numpy array plus an optional gradient buffer of the same shape."""

    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def sum(self) -> "Tensor":
        return sum_all(self)

    def mean(self) -> "Tensor":
        return mean_all(self)

    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return scale(self, 1.0, float(other))

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return sub(self, other)
        return scale(self, 1.0, -float(other))

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other), 0.0)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return div(self, other)
        return scale(self, 1.0 / float(other), 0.0)

    def __neg__(self):
        return scale(self, -1.0, 0.0)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}{tag})"


def scalar(value, dtype=np.float32) -> Tensor:
    """A 1x1x1x1 tensor holding one value."""
    return Tensor(np.full((1, 1, 1, 1), value, dtype=dtype))


def _result(out_data, inputs, backward_fn) -> Tensor:
    """Wrap an op result, recording it on the tape when gradients are live."""
    needs = _grad_enabled and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs)
    if needs:
        _tape.records.append((out, inputs, backward_fn))
    return out


def _accumulate(t: Tensor, g: np.ndarray):
    if t.grad is None:
        t.grad = g.copy()
    else:
        t.grad += g


def backward(loss: Tensor):
    """Populate d(loss)/d(param) for every parameter reachable from `loss`.

    Traverses the tape once in reverse execution order, then clears it.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward requires a scalar loss, got shape {loss.shape}")
    if not _tape.records:
        raise RuntimeError("backward on an empty tape (no recorded operations)")
    loss.grad = np.ones_like(loss.data)
    try:
        for out, inputs, fn in reversed(_tape.records):
            g = out.grad
            if g is None:
                continue
            grads = fn(g)
            for t, gt in zip(inputs, grads):
                if gt is None or not t.requires_grad:
                    continue
                _accumulate(t, gt)
    finally:
        _tape.clear()


def _require_4d(x: Tensor, op: str):
    if x.data.ndim != 4:
        raise ShapeError(f"{op} expects a (N,C,H,W) tensor, got shape {x.shape}")


# ---------------------------------------------------------------------------
# parameter containers


@dataclass
class ConvParams:
    """2-D cross-correlation filter bank: weight (C_out,C_in,kh,kw), bias (C_out)."""

    weight: Tensor
    bias: Tensor
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        if self.weight.data.ndim != 4:
            raise ShapeError(f"conv weight must be 4-D, got shape {self.weight.shape}")
        if self.bias is not None and self.bias.data.shape != (self.weight.shape[0],):
            raise ShapeError(
                f"conv bias shape {self.bias.shape} does not match "
                f"{self.weight.shape[0]} output channels"
            )
        if self.stride < 1:
            raise ShapeError(f"stride must be positive, got {self.stride}")
        if self.padding < 0:
            raise ShapeError(f"padding must be non-negative, got {self.padding}")

    @property
    def in_channels(self):
        return self.weight.shape[1]

    @property
    def out_channels(self):
        return self.weight.shape[0]


@dataclass
class BatchNormParams:
    """Per-channel affine normalization with tracked running statistics."""

    scale: Tensor
    shift: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    epsilon: float = 1e-5

    def __post_init__(self):
        c = self.scale.data.shape
        if self.shift.data.shape != c or self.running_mean.shape != c or self.running_var.shape != c:
            raise ShapeError("batch-norm parameter shapes disagree")
        if not (0.0 < self.momentum < 1.0):
            raise ShapeError(f"momentum must lie in (0,1), got {self.momentum}")
        if self.epsilon <= 0.0:
            raise ShapeError(f"epsilon must be positive, got {self.epsilon}")
        if np.any(self.running_var < 0):
            raise NumericsError("running variance has negative entries")

    @property
    def channels(self):
        return self.scale.data.shape[0]


# ---------------------------------------------------------------------------
# convolution


def conv2d(x: Tensor, p: ConvParams) -> Tensor:
    """Cross-correlate x with p.weight (matmul over unfolded patches) plus bias."""
    _require_4d(x, "conv2d")
    n, c, h, w = x.shape
    c_out, c_in, kh, kw = p.weight.shape
    if c != c_in:
        raise ShapeError(
            f"conv2d input has {c} channels (shape {x.shape}) but weight expects "
            f"{c_in} (shape {tuple(p.weight.shape)})"
        )
    s, pad = p.stride, p.padding
    h_out = (h + 2 * pad - kh) // s + 1
    w_out = (w + 2 * pad - kw) // s + 1
    if h_out < 1 or w_out < 1:
        raise ShapeError(
            f"conv2d kernel {kh}x{kw} (stride {s}, padding {pad}) does not fit "
            f"input of shape {x.shape}"
        )
    if pad:
        xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    else:
        xp = x.data
    L = h_out * w_out
    col = np.empty((n, c_in, kh, kw, h_out, w_out), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            col[:, :, i, j] = xp[:, :, i : i + s * h_out : s, j : j + s * w_out : s]
    col = col.reshape(n, c_in * kh * kw, L)
    w2 = p.weight.data.reshape(c_out, c_in * kh * kw)
    out = np.matmul(w2, col)
    if p.bias is not None:
        out += p.bias.data[None, :, None]
    out = out.reshape(n, c_out, h_out, w_out)

    weight, bias = p.weight, p.bias
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def bwd(g):
        g2 = np.ascontiguousarray(g.reshape(n, c_out, L))
        gw = gb = gx = None
        if weight.requires_grad:
            gw = np.tensordot(g2, col, axes=([0, 2], [0, 2])).reshape(weight.shape)
        if bias is not None and bias.requires_grad:
            gb = g2.sum(axis=(0, 2))
        if x.requires_grad:
            dcol = np.matmul(w2.T, g2).reshape(n, c_in, kh, kw, h_out, w_out)
            dxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i : i + s * h_out : s, j : j + s * w_out : s] += dcol[:, :, i, j]
            gx = dxp[:, :, pad : pad + h, pad : pad + w] if pad else dxp
        if bias is None:
            return gx, gw
        return gx, gw, gb

    return _result(out, inputs, bwd)


# ---------------------------------------------------------------------------
# pooling / resampling


def avg_pool(x: Tensor, r: int) -> Tensor:
    """Mean over non-overlapping r x r blocks."""
    _require_4d(x, "avg_pool")
    if r < 1:
        raise ShapeError(f"pooling rate must be positive, got {r}")
    n, c, h, w = x.shape
    if h % r or w % r:
        raise ShapeError(f"avg_pool rate {r} does not divide spatial size {h}x{w}")
    out = x.data.reshape(n, c, h // r, r, w // r, r).mean(axis=(3, 5))

    def bwd(g):
        gx = np.broadcast_to(
            g[:, :, :, None, :, None] / (r * r), (n, c, h // r, r, w // r, r)
        )
        return (gx.reshape(n, c, h, w),)

    return _result(out, (x,), bwd)


def interp_matrix(n_out: int, n_in: int, dtype=np.float32) -> np.ndarray:
    """Row-stochastic 1-D bilinear sampling matrix with half-pixel centers.

    Source coordinate for output index o is (o+0.5)*n_in/n_out - 0.5, clamped
    to the valid range; equal sizes give the identity exactly.
    """
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1.0)
    i0 = np.floor(src).astype(np.int64)
    i1 = np.minimum(i0 + 1, n_in - 1)
    w1 = src - i0
    m = np.zeros((n_out, n_in), dtype=np.float64)
    rows = np.arange(n_out)
    np.add.at(m, (rows, i0), 1.0 - w1)
    np.add.at(m, (rows, i1), w1)
    return m.astype(dtype)


_interp_cache: dict = {}


def _cached_interp(n_out, n_in, dtype):
    key = (n_out, n_in, np.dtype(dtype).name)
    m = _interp_cache.get(key)
    if m is None:
        m = interp_matrix(n_out, n_in, dtype)
        _interp_cache[key] = m
    return m


def upsample_bilinear(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Bilinear resize to (out_h, out_w) with half-pixel sample centers."""
    _require_4d(x, "upsample_bilinear")
    n, c, h, w = x.shape
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"target size {out_h}x{out_w} must be positive")
    if out_h < h or out_w < w:
        raise ShapeError(f"target {out_h}x{out_w} is smaller than input {h}x{w}")
    my = _cached_interp(out_h, h, x.dtype)
    mx = _cached_interp(out_w, w, x.dtype)
    out = np.matmul(np.matmul(my, x.data), mx.T)

    def bwd(g):
        return (np.matmul(np.matmul(my.T, g), mx),)

    return _result(out, (x,), bwd)


# ---------------------------------------------------------------------------
# pointwise nonlinearities


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    pos = x.data >= 0
    if _kink_trace is not None:
        _kink_trace.append(pos)
    out = np.where(pos, x.data, x.data * slope)

    def bwd(g):
        return (np.where(pos, g, g * slope),)

    return _result(out, (x,), bwd)


def sigmoid(x: Tensor) -> Tensor:
    """Numerically stable logistic function; saturates without overflow."""
    d = x.data
    out = np.empty_like(d)
    pos = d >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    ex = np.exp(d[~pos])
    out[~pos] = ex / (1.0 + ex)

    def bwd(g):
        return (g * out * (1.0 - out),)

    return _result(out, (x,), bwd)


def abs_val(x: Tensor) -> Tensor:
    """Elementwise |x|; subgradient 0 at exact zeros."""
    out = np.abs(x.data)
    sign = np.sign(x.data)
    if _kink_trace is not None:
        _kink_trace.append(x.data >= 0)

    def bwd(g):
        return (g * sign,)

    return _result(out, (x,), bwd)


# ---------------------------------------------------------------------------
# normalization


def batch_norm(x: Tensor, p: BatchNormParams, training: bool) -> Tensor:
    """Normalize per channel over (N,H,W); batch statistics while training,
    running statistics at inference. Training mode updates the running stats
    as a side effect (they never influence the training-mode output)."""
    _require_4d(x, "batch_norm")
    n, c, h, w = x.shape
    if c != p.channels:
        raise ShapeError(f"batch_norm expects {p.channels} channels, got {c} (shape {x.shape})")
    sc = p.scale.data[None, :, None, None]
    sh = p.shift.data[None, :, None, None]
    if training:
        m = n * h * w
        mean = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        inv_std = 1.0 / np.sqrt(var + p.epsilon)
        xhat = (x.data - mean[None, :, None, None]) * inv_std[None, :, None, None]
        out = sc * xhat + sh
        unbiased = var * (m / (m - 1)) if m > 1 else var
        p.running_mean += p.momentum * (mean.astype(p.running_mean.dtype) - p.running_mean)
        p.running_var += p.momentum * (unbiased.astype(p.running_var.dtype) - p.running_var)

        def bwd(g):
            dxhat = g * sc
            gx = None
            if x.requires_grad:
                s1 = dxhat.sum(axis=(0, 2, 3), keepdims=True)
                s2 = (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
                gx = (inv_std[None, :, None, None] / m) * (m * dxhat - s1 - xhat * s2)
            gs = (g * xhat).sum(axis=(0, 2, 3)) if p.scale.requires_grad else None
            gb = g.sum(axis=(0, 2, 3)) if p.shift.requires_grad else None
            return gx, gs, gb

    else:
        inv_std = 1.0 / np.sqrt(p.running_var + p.epsilon)
        xhat = (x.data - p.running_mean[None, :, None, None]) * inv_std[None, :, None, None]
        out = sc * xhat + sh

        def bwd(g):
            gx = g * sc * inv_std[None, :, None, None] if x.requires_grad else None
            gs = (g * xhat).sum(axis=(0, 2, 3)) if p.scale.requires_grad else None
            gb = g.sum(axis=(0, 2, 3)) if p.shift.requires_grad else None
            return gx, gs, gb

    return _result(out, (x, p.scale, p.shift), bwd)


# ---------------------------------------------------------------------------
# structural ops


def concat_channels(xs) -> Tensor:
    """Concatenate along the channel axis; the adjoint splits back."""
    xs = list(xs)
    if not xs:
        raise ShapeError("concat_channels needs at least one input")
    base = xs[0].shape
    for t in xs[1:]:
        if t.data.ndim != 4 or t.shape[0] != base[0] or t.shape[2:] != base[2:]:
            raise ShapeError(
                f"concat_channels operands disagree outside the channel axis: "
                f"{base} vs {t.shape}"
            )
    if len(xs) == 1:
        x = xs[0]
        return _result(x.data.copy(), (x,), lambda g: (g,))
    out = np.concatenate([t.data for t in xs], axis=1)
    sizes = [t.shape[1] for t in xs]
    edges = np.cumsum([0] + sizes)

    def bwd(g):
        return tuple(
            g[:, edges[i] : edges[i + 1]] if xs[i].requires_grad else None
            for i in range(len(xs))
        )

    return _result(out, tuple(xs), bwd)


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    _require_4d(x, "slice_channels")
    c = x.shape[1]
    if not (0 <= start < stop <= c):
        raise ShapeError(f"channel slice [{start}:{stop}] out of range for {c} channels")
    out = x.data[:, start:stop].copy()

    def bwd(g):
        gx = np.zeros_like(x.data)
        gx[:, start:stop] = g
        return (gx,)

    return _result(out, (x,), bwd)


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    if int(np.prod(shape)) != x.size:
        raise ShapeError(f"cannot reshape {x.shape} ({x.size} values) to {shape}")
    old = x.shape

    def bwd(g):
        return (g.reshape(old),)

    return _result(x.data.reshape(shape), (x,), bwd)


def permute_channels(x: Tensor, index: np.ndarray) -> Tensor:
    """Reorder channels: out[:, k] = x[:, index[k]]."""
    _require_4d(x, "permute_channels")
    index = np.asarray(index, dtype=np.int64)
    if index.shape != (x.shape[1],):
        raise ShapeError(f"permutation of length {index.size} on {x.shape[1]} channels")
    inverse = np.empty_like(index)
    inverse[index] = np.arange(index.size)
    out = x.data[:, index]

    def bwd(g):
        return (g[:, inverse],)

    return _result(out, (x,), bwd)


def tile_channels(x: Tensor, reps: int) -> Tensor:
    """Repeat the whole channel block `reps` times: [x, x, ..., x]."""
    _require_4d(x, "tile_channels")
    n, c, h, w = x.shape
    out = np.tile(x.data, (1, reps, 1, 1))

    def bwd(g):
        return (g.reshape(n, reps, c, h, w).sum(axis=1),)

    return _result(out, (x,), bwd)


def repeat_channel_blocks(x: Tensor, reps: int, block: int = 1) -> Tensor:
    """Repeat each consecutive `block`-channel group `reps` times in place."""
    _require_4d(x, "repeat_channel_blocks")
    n, c, h, w = x.shape
    if c % block:
        raise ShapeError(f"block size {block} does not divide {c} channels")
    gsz = c // block
    out = (
        np.repeat(x.data.reshape(n, gsz, block, h, w), reps, axis=1)
        .reshape(n, c * reps, h, w)
    )

    def bwd(g):
        return (g.reshape(n, gsz, reps, block, h, w).sum(axis=2).reshape(n, c, h, w),)

    return _result(out, (x,), bwd)


def sum_channel_groups(x: Tensor, group: int) -> Tensor:
    """Sum each consecutive group of `group` channels down to one channel."""
    _require_4d(x, "sum_channel_groups")
    n, c, h, w = x.shape
    if c % group:
        raise ShapeError(f"group size {group} does not divide {c} channels")
    out = x.data.reshape(n, c // group, group, h, w).sum(axis=2)

    def bwd(g):
        gx = np.broadcast_to(g[:, :, None], (n, c // group, group, h, w))
        return (gx.reshape(n, c, h, w),)

    return _result(out, (x,), bwd)


def neighbor_stack(x: Tensor, footprint: int) -> Tensor:
    """Stack all footprint^2 zero-padded spatial shifts of x along channels.

    Output block p (position-major) holds x shifted by the p-th window offset,
    so out[:, p*C:(p+1)*C, y, x'] = x[:, :, y+dy-f//2, x'+dx-f//2] (zero outside).
    """
    _require_4d(x, "neighbor_stack")
    if footprint < 1 or footprint % 2 == 0:
        raise ShapeError(f"footprint must be odd and positive, got {footprint}")
    n, c, h, w = x.shape
    f2 = footprint // 2
    xp = np.pad(x.data, ((0, 0), (0, 0), (f2, f2), (f2, f2)))
    views = [
        xp[:, :, dy : dy + h, dx : dx + w]
        for dy in range(footprint)
        for dx in range(footprint)
    ]
    out = np.concatenate(views, axis=1)

    def bwd(g):
        gp = np.zeros_like(xp)
        p = 0
        for dy in range(footprint):
            for dx in range(footprint):
                gp[:, :, dy : dy + h, dx : dx + w] += g[:, p * c : (p + 1) * c]
                p += 1
        return (gp[:, :, f2 : f2 + h, f2 : f2 + w],)

    return _result(out, (x,), bwd)


# ---------------------------------------------------------------------------
# elementwise arithmetic (identical shapes; no implicit broadcasting)


def _check_same_shape(a: Tensor, b: Tensor, op: str):
    if a.shape != b.shape:
        raise ShapeError(f"{op} operand shapes differ: {a.shape} vs {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "add")
    return _result(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "sub")
    return _result(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Hadamard product."""
    _check_same_shape(a, b, "mul")

    def bwd(g):
        ga = g * b.data if a.requires_grad else None
        gb = g * a.data if b.requires_grad else None
        return ga, gb

    return _result(a.data * b.data, (a, b), bwd)


def div(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "div")
    out = a.data / b.data

    def bwd(g):
        ga = g / b.data if a.requires_grad else None
        gb = -g * out / b.data if b.requires_grad else None
        return ga, gb

    return _result(out, (a, b), bwd)


def scale(x: Tensor, k: float, b: float = 0.0) -> Tensor:
    """Affine map k*x + b with scalar constants."""
    return _result(x.data * k + b, (x,), lambda g: (g * k,))


def add_array(x: Tensor, arr: np.ndarray) -> Tensor:
    """Add a constant (non-differentiated) array, broadcast against x."""
    out = x.data + arr
    if out.shape != x.shape:
        raise ShapeError(f"constant of shape {arr.shape} broadcasts {x.shape} to {out.shape}")
    return _result(out, (x,), lambda g: (g,))


def mul_array(x: Tensor, arr: np.ndarray) -> Tensor:
    """Multiply by a constant (non-differentiated) array, broadcast against x."""
    out = x.data * arr
    if out.shape != x.shape:
        raise ShapeError(f"constant of shape {arr.shape} broadcasts {x.shape} to {out.shape}")
    return _result(out, (x,), lambda g: (g * arr,))


# ---------------------------------------------------------------------------
# reductions


def sum_all(x: Tensor) -> Tensor:
    out = np.full((1, 1, 1, 1), x.data.sum(dtype=x.dtype), dtype=x.dtype)
    shape = x.data.shape

    def bwd(g):
        return (np.full(shape, g.reshape(())[()], dtype=g.dtype),)

    return _result(out, (x,), bwd)


def mean_all(x: Tensor) -> Tensor:
    n = x.size
    out = np.full((1, 1, 1, 1), x.data.mean(dtype=np.float64), dtype=x.dtype)
    shape = x.data.shape

    def bwd(g):
        return (np.full(shape, g.reshape(())[()] / n, dtype=g.dtype),)

    return _result(out, (x,), bwd)


# ---------------------------------------------------------------------------
# attention weight normalization


def softmax_over_positions(x: Tensor, groups: int, positions: int) -> Tensor:
    """Softmax along the position axis of a (N, groups*positions, H, W) tensor.

    Channel k belongs to group k // positions and position k % positions.
    Computed with max-subtraction; each group's weights sum to one.
    """
    _require_4d(x, "softmax_over_positions")
    n, c, h, w = x.shape
    if positions < 1 or groups < 1 or c != groups * positions:
        raise ShapeError(
            f"softmax_over_positions: {c} channels cannot split into "
            f"{groups} groups x {positions} positions"
        )
    z = x.data.reshape(n, groups, positions, h, w)
    z = z - z.max(axis=2, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=2, keepdims=True)
    out = y.reshape(n, c, h, w)

    def bwd(g):
        gr = g.reshape(n, groups, positions, h, w)
        dot = (gr * y).sum(axis=2, keepdims=True)
        return ((y * (gr - dot)).reshape(n, c, h, w),)

    return _result(out, (x,), bwd)
