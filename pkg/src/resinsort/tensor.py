"""Dense tensor engine: conv / relu / max-pool / fully-connected layers with
hand-written backward passes, plus classical momentum SGD.

Layout is row-major height x width x channel (HWC) for single images and
NHWC for batches. Every op accepts either a single image or a batch; a
single image is treated as a batch of one and returned unbatched.
Everything runs in float64.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPE = np.float64


class DimensionError(ValueError):
    """Raised when tensor shapes do not compose."""


class Tensor:
    """A dense float64 array with an optional gradient buffer of the same shape."""

    __slots__ = ("data", "grad")

    def __init__(self, data, grad=None):
        self.data = np.ascontiguousarray(data, dtype=DTYPE)
        if grad is not None:
            grad = np.ascontiguousarray(grad, dtype=DTYPE)
            if grad.shape != self.data.shape:
                raise DimensionError(
                    f"gradient shape {grad.shape} != value shape {self.data.shape}")
        self.grad = grad

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape})"


def _values(x):
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=DTYPE)


def _batched(x, rank):
    """Add a leading batch axis if ``x`` has exactly ``rank`` dims."""
    x = _values(x)
    if x.ndim == rank:
        return x[None], True
    if x.ndim == rank + 1:
        return x, False
    raise DimensionError(f"expected a rank-{rank} tensor or a batch of them, got shape {x.shape}")


def glorot_uniform(shape, fan_in, fan_out, rng):
    a = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=shape)


# --------------------------------------------------------------------------
# Convolution
# --------------------------------------------------------------------------

def conv_output_extent(size, kernel, stride, padding):
    return (size + 2 * padding - kernel) // stride + 1


@dataclass
class ConvLayer:
    filters: Tensor  # (count, kh, kw, in_channels)
    bias: Tensor  # (count,)
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        if self.filters.data.ndim != 4:
            raise DimensionError(f"filters must be rank 4, got {self.filters.shape}")
        if self.bias.shape != (self.filters.shape[0],):
            raise DimensionError(
                f"bias shape {self.bias.shape} does not match {self.filters.shape[0]} filters")
        if self.stride < 1 or self.padding < 0:
            raise ValueError("stride must be >= 1 and padding >= 0")

    @classmethod
    def init(cls, count, kernel, in_channels, rng, stride=1, padding=0):
        fan_in = kernel * kernel * in_channels
        fan_out = kernel * kernel * count
        w = glorot_uniform((count, kernel, kernel, in_channels), fan_in, fan_out, rng)
        return cls(Tensor(w), Tensor(np.zeros(count)), stride, padding)

    def output_shape(self, input_shape):
        h, w, c = input_shape
        count, kh, kw, cin = self.filters.shape
        if c != cin:
            raise DimensionError(
                f"input depth {c} does not match filter depth {cin}")
        oh = conv_output_extent(h, kh, self.stride, self.padding)
        ow = conv_output_extent(w, kw, self.stride, self.padding)
        if oh < 1 or ow < 1:
            raise DimensionError(
                f"{kh}x{kw} kernel (stride {self.stride}, padding {self.padding}) "
                f"does not fit a {h}x{w} input")
        return (oh, ow, count)

    def params(self):
        return [self.filters, self.bias]


def _im2col(x, kh, kw, stride, padding):
    """(N,H,W,C) -> (N,OH,OW,kh,kw,C) windows; a strided view where possible."""
    if padding:
        x = np.pad(x, ((0, 0), (padding, padding), (padding, padding), (0, 0)))
    win = sliding_window_view(x, (kh, kw), axis=(1, 2))  # N,OH',OW',C,kh,kw
    win = win[:, ::stride, ::stride]
    return win.transpose(0, 1, 2, 4, 5, 3)


def conv2d_forward(x, layer: ConvLayer, return_cols=False):
    """out[i,j,f] = bias[f] + sum over the (i,j) window of input * filter f.

    ``return_cols`` also returns the unrolled input windows, which
    :func:`conv2d_backward` accepts to avoid rebuilding them.
    """
    xb, single = _batched(x, 3)
    oh, ow, count = layer.output_shape(xb.shape[1:])
    _, kh, kw, cin = layer.filters.shape
    cols = _im2col(xb, kh, kw, layer.stride, layer.padding).reshape(-1, kh * kw * cin)
    out = cols @ layer.filters.data.reshape(count, -1).T
    out += layer.bias.data
    out = out.reshape(xb.shape[0], oh, ow, count)
    if single:
        out = out[0]
    return (out, cols) if return_cols else out


def conv2d_backward(x, layer: ConvLayer, grad_out, input_grad=True, cols=None):
    """Return (grad_input, grad_filters, grad_bias) for ``conv2d_forward(x, layer)``.

    With ``input_grad=False`` the input gradient is skipped and returned as None
    (first layer of a network).
    """
    xb, single = _batched(x, 3)
    gb = _values(grad_out)
    if single:
        gb = gb[None]
    n, h, w, cin = xb.shape
    expected = (n,) + layer.output_shape((h, w, cin))
    if gb.shape != expected:
        raise DimensionError(f"grad_out shape {gb.shape} != forward output shape {expected}")
    count, kh, kw, _ = layer.filters.shape
    oh, ow = expected[1], expected[2]
    s, p = layer.stride, layer.padding

    g2 = gb.reshape(-1, count)
    if cols is None:
        cols = _im2col(xb, kh, kw, s, p).reshape(-1, kh * kw * cin)
    grad_filters = (g2.T @ cols).reshape(layer.filters.shape)
    grad_bias = g2.sum(axis=0)
    if not input_grad:
        return None, grad_filters, grad_bias

    dcols = (g2 @ layer.filters.data.reshape(count, -1)).reshape(n, oh, ow, kh, kw, cin)
    dxp = np.zeros((n, h + 2 * p, w + 2 * p, cin))
    for i in range(kh):
        for j in range(kw):
            dxp[:, i:i + s * oh:s, j:j + s * ow:s, :] += dcols[:, :, :, i, j, :]
    dx = dxp[:, p:p + h, p:p + w, :] if p else dxp
    return (dx[0] if single else dx), grad_filters, grad_bias


# --------------------------------------------------------------------------
# ReLU
# --------------------------------------------------------------------------

def relu(x):
    return np.maximum(_values(x), 0.0)


def relu_backward(x, grad_out):
    return np.where(_values(x) > 0, _values(grad_out), 0.0)


# --------------------------------------------------------------------------
# Max pooling
# --------------------------------------------------------------------------

def maxpool_output_shape(input_shape, window, stride):
    h, w, c = input_shape
    if window > h or window > w:
        raise DimensionError(f"pool window {window} larger than {h}x{w} input")
    return ((h - window) // stride + 1, (w - window) // stride + 1, c)


def maxpool_forward(x, window=2, stride=2):
    """Channelwise max over each window.

    Returns the pooled tensor and the argmax index (row-major within the
    window, first occurrence on ties) needed by :func:`maxpool_backward`.
    """
    xb, single = _batched(x, 3)
    oh, ow, c = maxpool_output_shape(xb.shape[1:], window, stride)
    win = sliding_window_view(xb, (window, window), axis=(1, 2))[:, ::stride, ::stride]
    win = win.reshape(xb.shape[0], oh, ow, c, window * window)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    if single:
        return out[0], arg[0]
    return out, arg


def maxpool_backward(input_shape, argmax, grad_out, window=2, stride=2):
    """Route each pooled gradient back to its argmax position."""
    g = _values(grad_out)
    single = len(input_shape) == 3
    if single:
        g, argmax = g[None], np.asarray(argmax)[None]
        input_shape = (1,) + tuple(input_shape)
    if g.shape != argmax.shape:
        raise DimensionError(f"grad_out shape {g.shape} != pooled shape {argmax.shape}")
    n, h, w, c = input_shape
    _, oh, ow, _ = g.shape
    di, dj = np.divmod(argmax, window)
    rows = np.arange(oh)[None, :, None, None] * stride + di
    cols = np.arange(ow)[None, None, :, None] * stride + dj
    bidx = np.broadcast_to(np.arange(n)[:, None, None, None], g.shape)
    cidx = np.broadcast_to(np.arange(c)[None, None, None, :], g.shape)
    dx = np.zeros((n, h, w, c))
    if stride >= window:
        # non-overlapping windows: each input cell receives at most one gradient
        dx[bidx, rows, cols, cidx] = g
    else:
        np.add.at(dx, (bidx, rows, cols, cidx), g)
    return dx[0] if single else dx


# --------------------------------------------------------------------------
# Fully connected
# --------------------------------------------------------------------------

@dataclass
class FcLayer:
    weights: Tensor  # (out, in)
    bias: Tensor  # (out,)

    def __post_init__(self):
        if self.weights.data.ndim != 2:
            raise DimensionError(f"weights must be rank 2, got {self.weights.shape}")
        if self.bias.shape != (self.weights.shape[0],):
            raise DimensionError(
                f"bias shape {self.bias.shape} does not match {self.weights.shape[0]} outputs")

    @classmethod
    def init(cls, n_in, n_out, rng):
        w = glorot_uniform((n_out, n_in), n_in, n_out, rng)
        return cls(Tensor(w), Tensor(np.zeros(n_out)))

    def params(self):
        return [self.weights, self.bias]


def fc_forward(x, layer: FcLayer, batched=False):
    """y = W . flatten(x) + b.  With ``batched`` the leading axis is kept."""
    x = _values(x)
    flat = x.reshape(x.shape[0], -1) if batched else x.reshape(1, -1)
    n_in = layer.weights.shape[1]
    if flat.shape[1] != n_in:
        raise DimensionError(
            f"flattened input length {flat.shape[1]} != weight columns {n_in}")
    y = flat @ layer.weights.data.T + layer.bias.data
    return y if batched else y[0]


def fc_backward(x, layer: FcLayer, grad_out, batched=False):
    """Return (grad_input shaped like x, grad_weights, grad_bias)."""
    x = _values(x)
    g = _values(grad_out)
    flat = x.reshape(x.shape[0], -1) if batched else x.reshape(1, -1)
    g2 = g if batched else g.reshape(1, -1)
    if g2.shape != (flat.shape[0], layer.weights.shape[0]):
        raise DimensionError(f"grad_out shape {g.shape} does not match layer output")
    grad_w = g2.T @ flat
    grad_b = g2.sum(axis=0)
    dx = (g2 @ layer.weights.data).reshape(x.shape)
    return dx, grad_w, grad_b


# --------------------------------------------------------------------------
# Distances
# --------------------------------------------------------------------------

def _check_same_length(a, b):
    if a.shape[-1] != b.shape[-1]:
        raise DimensionError(f"embedding lengths differ: {a.shape[-1]} vs {b.shape[-1]}")


def l1_distance(a, b):
    """Componentwise |a - b| (a vector, not a scalar)."""
    a, b = _values(a), _values(b)
    _check_same_length(a, b)
    return np.abs(a - b)


def l1_distance_backward(a, b, grad_out):
    """Gradients of ``l1_distance`` w.r.t. a and b (subgradient 0 where a == b)."""
    a, b = _values(a), _values(b)
    g = np.sign(a - b) * _values(grad_out)
    return g, -g


def euclidean_distance(a, b):
    a, b = _values(a), _values(b)
    _check_same_length(a, b)
    return np.sqrt(np.sum((a - b) ** 2, axis=-1))


# --------------------------------------------------------------------------
# Optimizer
# --------------------------------------------------------------------------

@dataclass
class MomentumState:
    """Velocity buffers for classical (heavy-ball) momentum."""

    learning_rate: float = 0.001
    momentum: float = 0.9
    velocity: list = field(default_factory=list)

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")


def sgd_momentum_step(params, grads, state: MomentumState):
    """In place: v <- momentum * v + g ;  p <- p - lr * v.

    ``params`` are Tensors (or arrays); ``grads`` arrays of matching shape.
    Velocity buffers are created lazily on the first call.
    """
    if not state.velocity:
        state.velocity = [np.zeros_like(_values(p)) for p in params]
    if len(state.velocity) != len(params) or len(grads) != len(params):
        raise DimensionError("params, grads and velocity buffers must align")
    for p, g, v in zip(params, grads, state.velocity):
        arr = p.data if isinstance(p, Tensor) else p
        g = _values(g)
        if g.shape != arr.shape or v.shape != arr.shape:
            raise DimensionError(f"shape mismatch: param {arr.shape}, grad {g.shape}, velocity {v.shape}")
        v *= state.momentum
        v += g
        arr -= state.learning_rate * v
    return params, state
