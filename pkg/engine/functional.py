"""
Functional Operations Module

Differentiable operations of the tensor engine. Every function takes and returns
Tensors; backward rules are closures over the forward intermediates. Images use
(batch, channels, height, width) layout and convolutions use cross-correlation
semantics (no kernel flip).
"""
from typing import List, NamedTuple, Optional, Sequence, Tuple, Union
import logging
import math

import numpy as np
from numpy.lib.stride_tricks import as_strided
from scipy.special import expit

from engine.tensor import Tensor, as_tensor, make_result
from utils.error_utils import ConfigurationError, ShapeError, UsageError

# Configure logging
logger = logging.getLogger(__name__)
logger.setLevel(logging.INFO)

Axis = Union[None, int, Tuple[int, ...]]


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to `shape`."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _normalize_axes(axis: Axis, ndim: int) -> Tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


def _operands(a, b) -> Tuple[Tensor, Tensor]:
    like = a if isinstance(a, Tensor) else b
    return as_tensor(a, like), as_tensor(b, like)


# ---------------------------------------------------------------------------
# Element-wise arithmetic
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _operands(a, b)

    def rule(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return make_result(a.data + b.data, (a, b), "add", rule)


def sub(a, b) -> Tensor:
    a, b = _operands(a, b)

    def rule(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return make_result(a.data - b.data, (a, b), "sub", rule)


def mul(a, b) -> Tensor:
    a, b = _operands(a, b)

    def rule(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return make_result(a.data * b.data, (a, b), "mul", rule)


def div(a, b) -> Tensor:
    a, b = _operands(a, b)

    def rule(g):
        return (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        )

    return make_result(a.data / b.data, (a, b), "div", rule)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over the last two axes with broadcasting of batch axes."""
    a, b = _operands(a, b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(
            "matmul operands are not aligned",
            {'left': a.dims, 'right': b.dims}
        )

    def rule(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return make_result(np.matmul(a.data, b.data), (a, b), "matmul", rule)


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return make_result(y, (x,), "exp", lambda g: (g * y,))


def log(x: Tensor) -> Tensor:
    return make_result(np.log(x.data), (x,), "log", lambda g: (g / x.data,))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return make_result(np.where(mask, x.data, 0).astype(x.dtype), (x,), "relu", lambda g: (g * mask,))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    v = x.data
    t = np.tanh(_GELU_C * (v + 0.044715 * v ** 3))
    y = 0.5 * v * (1.0 + t)

    def rule(g):
        dt = (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * v * v)
        return (g * (0.5 * (1.0 + t) + 0.5 * v * dt),)

    return make_result(y.astype(x.dtype), (x,), "gelu", rule)


def sigmoid(x: Tensor) -> Tensor:
    y = expit(x.data).astype(x.dtype)
    return make_result(y, (x,), "sigmoid", lambda g: (g * y * (1.0 - y),))


# ---------------------------------------------------------------------------
# Reductions and shape manipulation
# ---------------------------------------------------------------------------

def sum(x: Tensor, axis: Axis = None, keepdims: bool = False) -> Tensor:
    axes = _normalize_axes(axis, x.ndim)

    def rule(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape),)

    return make_result(np.sum(x.data, axis=axes, keepdims=keepdims), (x,), "sum", rule)


def mean(x: Tensor, axis: Axis = None, keepdims: bool = False) -> Tensor:
    axes = _normalize_axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1

    def rule(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, x.shape),)

    return make_result(np.mean(x.data, axis=axes, keepdims=keepdims), (x,), "mean", rule)


def amax(x: Tensor, axis: Axis = None, keepdims: bool = False) -> Tensor:
    """Maximum along axes; ties share the gradient equally."""
    axes = _normalize_axes(axis, x.ndim)
    peak = np.max(x.data, axis=axes, keepdims=True)
    mask = (x.data == peak).astype(x.dtype)
    mask /= mask.sum(axis=axes, keepdims=True)

    def rule(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (mask * g,)

    out = peak if keepdims else np.squeeze(peak, axis=axes)
    return make_result(out, (x,), "amax", rule)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    return make_result(x.data.reshape(shape), (x,), "reshape", lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return make_result(np.transpose(x.data, axes), (x,), "transpose", lambda g: (np.transpose(g, inverse),))


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    """Concatenate along `axis` (channels by default)."""
    if not tensors:
        raise UsageError("concat needs at least one tensor")
    tensors = tuple(tensors)
    axis = axis % tensors[0].ndim
    for t in tensors[1:]:
        if t.ndim != tensors[0].ndim or any(
            a != b for i, (a, b) in enumerate(zip(t.shape, tensors[0].shape)) if i != axis
        ):
            raise ShapeError(
                "concat operands differ outside the concatenation axis",
                {'axis': axis, 'shapes': [list(s.shape) for s in tensors]}
            )
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def rule(g):
        return tuple(np.split(g, bounds, axis=axis))

    data = np.concatenate([t.data for t in tensors], axis=axis)
    return make_result(data, tensors, "concat", rule)


def slice_axis(x: Tensor, start: int, stop: int, axis: int) -> Tensor:
    axis = axis % x.ndim
    index = [slice(None)] * x.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)

    def rule(g):
        full = np.zeros_like(x.data)
        full[index] = g
        return (full,)

    return make_result(x.data[index].copy(), (x,), "slice", rule)


def split(x: Tensor, sizes: Sequence[int], axis: int = 1) -> List[Tensor]:
    """Split along `axis` into consecutive pieces of the given sizes."""
    if int(np.sum(sizes)) != x.shape[axis]:
        raise ShapeError("split sizes do not cover the axis", {'sizes': list(sizes), 'extent': x.shape[axis]})
    pieces, start = [], 0
    for size in sizes:
        pieces.append(slice_axis(x, start, start + size, axis))
        start += size
    return pieces


# ---------------------------------------------------------------------------
# Normalised exponentials
# ---------------------------------------------------------------------------

def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / np.sum(e, axis=axis, keepdims=True)

    def rule(g):
        return (y * (g - np.sum(g * y, axis=axis, keepdims=True)),)

    return make_result(y, (x,), "softmax", rule)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - np.max(x.data, axis=axis, keepdims=True)
    y = shifted - np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))

    def rule(g):
        return (g - np.exp(y) * np.sum(g, axis=axis, keepdims=True),)

    return make_result(y, (x,), "log_softmax", rule)


# ---------------------------------------------------------------------------
# Convolution, pooling and resampling
# ---------------------------------------------------------------------------

def conv_output_size(size: int, kernel: int, stride: int, padding: int, dilation: int) -> int:
    return (size + 2 * padding - dilation * (kernel - 1) - 1) // stride + 1


def _windows(padded: np.ndarray, kernel: int, stride: int, dilation: int,
             out_h: int, out_w: int) -> np.ndarray:
    """Strided view (B, C, k, k, out_h, out_w) over a padded image."""
    b, c = padded.shape[:2]
    sb, sc, sh, sw = padded.strides
    return as_strided(
        padded,
        shape=(b, c, kernel, kernel, out_h, out_w),
        strides=(sb, sc, sh * dilation, sw * dilation, sh * stride, sw * stride),
        writeable=False,
    )


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None,
           stride: int = 1, padding: int = 0, dilation: int = 1) -> Tensor:
    """
    2-D cross-correlation.

    Args:
        x: Input of shape (B, Cin, H, W)
        weight: Kernel of shape (Cout, Cin, k, k)
        bias: Optional bias of shape (Cout,)
        stride: Step between output positions
        padding: Zero padding on every side
        dilation: Spacing between kernel taps

    Returns:
        Tensor of shape (B, Cout, H', W')

    Raises:
        ShapeError: If input and weight shapes disagree
        ConfigurationError: If the geometry yields a non-positive output extent
    """
    if x.ndim != 4 or weight.ndim != 4 or weight.shape[2] != weight.shape[3]:
        raise ShapeError("conv2d expects a 4-D input and a square 4-D kernel",
                         {'input': x.dims, 'weight': weight.dims})
    batch, cin, height, width = x.shape
    cout, wcin, kernel, _ = weight.shape
    if wcin != cin:
        raise ShapeError("conv2d input channels do not match the kernel",
                         {'input_channels': cin, 'kernel_channels': wcin})
    if bias is not None and bias.shape != (cout,):
        raise ShapeError("conv2d bias must have one value per output channel",
                         {'expected': [cout], 'actual': bias.dims})
    if stride < 1 or dilation < 1 or padding < 0:
        raise ConfigurationError("conv2d needs stride >= 1, dilation >= 1 and padding >= 0",
                                 {'stride': stride, 'dilation': dilation, 'padding': padding})
    out_h = conv_output_size(height, kernel, stride, padding, dilation)
    out_w = conv_output_size(width, kernel, stride, padding, dilation)
    if out_h <= 0 or out_w <= 0:
        raise ConfigurationError("conv2d output extent is not positive",
                                 {'input': [height, width], 'kernel': kernel, 'stride': stride,
                                  'padding': padding, 'dilation': dilation})

    padded = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = _windows(padded, kernel, stride, dilation, out_h, out_w)
    cols = cols.transpose(0, 4, 5, 1, 2, 3).reshape(batch * out_h * out_w, cin * kernel * kernel)
    w2 = weight.data.reshape(cout, -1)
    out = cols @ w2.T
    if bias is not None:
        out = out + bias.data
    out = out.reshape(batch, out_h, out_w, cout).transpose(0, 3, 1, 2)

    def rule(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, cout)
        grad_w = (g2.T @ cols).reshape(weight.shape) if weight.requires_grad else None
        grad_b = g.sum(axis=(0, 2, 3)) if bias is not None and bias.requires_grad else None
        grad_x = None
        if x.requires_grad:
            dcols = (g2 @ w2).reshape(batch, out_h, out_w, cin, kernel, kernel).transpose(0, 3, 4, 5, 1, 2)
            dpad = np.zeros_like(padded)
            span_h = stride * (out_h - 1) + 1
            span_w = stride * (out_w - 1) + 1
            for i in range(kernel):
                for j in range(kernel):
                    dpad[:, :, i * dilation:i * dilation + span_h:stride,
                         j * dilation:j * dilation + span_w:stride] += dcols[:, :, i, j]
            grad_x = dpad[:, :, padding:padding + height, padding:padding + width]
        return (grad_x, grad_w) if bias is None else (grad_x, grad_w, grad_b)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_result(np.ascontiguousarray(out), parents, "conv2d", rule)


def max_pool2d(x: Tensor, kernel: int = 3, stride: int = 2, padding: int = 1) -> Tensor:
    batch, channels, height, width = x.shape
    out_h = conv_output_size(height, kernel, stride, padding, 1)
    out_w = conv_output_size(width, kernel, stride, padding, 1)
    if out_h <= 0 or out_w <= 0:
        raise ConfigurationError("max_pool2d output extent is not positive", {'input': [height, width]})
    padded = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)),
                    constant_values=-np.inf)
    windows = _windows(padded, kernel, stride, 1, out_h, out_w)
    windows = windows.transpose(0, 1, 4, 5, 2, 3).reshape(batch, channels, out_h, out_w, kernel * kernel)
    arg = np.argmax(windows, axis=-1)
    out = np.take_along_axis(windows, arg[..., None], axis=-1)[..., 0]

    def rule(g):
        dpad = np.zeros_like(padded)
        span_h = stride * (out_h - 1) + 1
        span_w = stride * (out_w - 1) + 1
        for idx in range(kernel * kernel):
            i, j = divmod(idx, kernel)
            dpad[:, :, i:i + span_h:stride, j:j + span_w:stride] += g * (arg == idx)
        return (dpad[:, :, padding:padding + height, padding:padding + width],)

    return make_result(np.ascontiguousarray(out), (x,), "max_pool2d", rule)


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over the spatial axes, keeping them as 1 x 1."""
    return mean(x, axis=(2, 3), keepdims=True)


def interpolation_matrix(in_size: int, out_size: int, dtype=np.float32) -> np.ndarray:
    """
    Linear interpolation weights (out_size x in_size) with half-pixel centres
    (align_corners=False); source coordinates below zero clamp to the first pixel.
    """
    scale = in_size / out_size
    dst = np.arange(out_size)
    src = np.maximum((dst + 0.5) * scale - 0.5, 0.0)
    lo = np.minimum(np.floor(src).astype(np.int64), in_size - 1)
    hi = np.minimum(lo + 1, in_size - 1)
    frac = src - lo
    matrix = np.zeros((out_size, in_size), dtype=np.float64)
    np.add.at(matrix, (dst, lo), 1.0 - frac)
    np.add.at(matrix, (dst, hi), frac)
    return matrix.astype(dtype)


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """
    Bilinear resampling of the two trailing axes.

    Raises:
        ShapeError: If the input is not 4-D or a target extent is below 1
    """
    if x.ndim != 4:
        raise ShapeError("bilinear_resize expects a 4-D input", {'actual': x.dims})
    if out_h < 1 or out_w < 1:
        raise ShapeError("bilinear_resize target extents must be positive", {'target': [out_h, out_w]})
    height, width = x.shape[2:]
    if (out_h, out_w) == (height, width):
        return make_result(x.data.copy(), (x,), "bilinear_resize", lambda g: (g,))
    mh = interpolation_matrix(height, out_h, x.dtype)
    mw = interpolation_matrix(width, out_w, x.dtype)
    out = np.matmul(np.matmul(mh, x.data), mw.T)

    def rule(g):
        return (np.matmul(np.matmul(mh.T, g), mw),)

    return make_result(out, (x,), "bilinear_resize", rule)


# ---------------------------------------------------------------------------
# Normalisation
# ---------------------------------------------------------------------------

def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor,
               running_mean: np.ndarray, running_var: np.ndarray,
               training: bool, momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """
    Batch normalisation over (B, H, W) per channel.

    In training mode batch statistics are used and the running buffers are
    updated in place; in evaluation mode the running buffers are used.
    """
    axes = (0, 2, 3)
    count = x.shape[0] * x.shape[2] * x.shape[3]
    if training:
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        unbiased = var * count / max(count - 1, 1)
        running_mean[...] = (1.0 - momentum) * running_mean + momentum * mu
        running_var[...] = (1.0 - momentum) * running_var + momentum * unbiased
    else:
        mu = running_mean.astype(x.dtype)
        var = running_var.astype(x.dtype)
    inv_std = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = (x.data - mu[None, :, None, None]) * inv_std[None, :, None, None]
    out = xhat * gamma.data[None, :, None, None] + beta.data[None, :, None, None]

    def rule(g):
        grad_gamma = np.sum(g * xhat, axis=axes)
        grad_beta = np.sum(g, axis=axes)
        dxhat = g * gamma.data[None, :, None, None]
        if training:
            grad_x = (inv_std[None, :, None, None] / count) * (
                count * dxhat
                - dxhat.sum(axis=axes, keepdims=True)
                - xhat * (dxhat * xhat).sum(axis=axes, keepdims=True)
            )
        else:
            grad_x = dxhat * inv_std[None, :, None, None]
        return grad_x, grad_gamma, grad_beta

    return make_result(out.astype(x.dtype), (x, gamma, beta), "batch_norm", rule)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis."""
    features = x.shape[-1]
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv_std
    out = xhat * gamma.data + beta.data
    lead = tuple(range(x.ndim - 1))

    def rule(g):
        dxhat = g * gamma.data
        grad_x = (inv_std / features) * (
            features * dxhat
            - dxhat.sum(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True)
        )
        return grad_x, np.sum(g * xhat, axis=lead), np.sum(g, axis=lead)

    return make_result(out.astype(x.dtype), (x, gamma, beta), "layer_norm", rule)


# ---------------------------------------------------------------------------
# Dense layers and attention
# ---------------------------------------------------------------------------

def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """x @ weight (+ bias); weight is stored (in_features, out_features)."""
    out = matmul(x, weight)
    return out if bias is None else add(out, bias)


class AttentionParams(NamedTuple):
    """Projection weights (D, D) and biases (D,) of one attention layer."""
    wq: Tensor
    bq: Tensor
    wk: Tensor
    bk: Tensor
    wv: Tensor
    bv: Tensor
    wo: Tensor
    bo: Tensor


def multi_head_self_attention(tokens: Tensor, params: AttentionParams, heads: int,
                              return_weights: bool = False):
    """
    Scaled dot-product self-attention with `heads` heads and an output projection.

    Args:
        tokens: Tensor of shape (B, N, D)
        params: Projection parameters
        heads: Number of heads; must divide D
        return_weights: Also return the (B, heads, N, N) attention weights

    Returns:
        Tensor of shape (B, N, D), or (output, weights) when requested

    Raises:
        ConfigurationError: If D is not divisible by `heads`
    """
    batch, count, dim = tokens.shape
    if heads < 1 or dim % heads != 0:
        raise ConfigurationError("Embedding dimension must be divisible by the head count",
                                 {'embed_dim': dim, 'heads': heads})
    head_dim = dim // heads

    def split_heads(t: Tensor) -> Tensor:
        return transpose(reshape(t, (batch, count, heads, head_dim)), (0, 2, 1, 3))

    q = split_heads(linear(tokens, params.wq, params.bq))
    k = split_heads(linear(tokens, params.wk, params.bk))
    v = split_heads(linear(tokens, params.wv, params.bv))
    scores = mul(matmul(q, transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(head_dim))
    weights = softmax(scores, axis=-1)
    mixed = transpose(matmul(weights, v), (0, 2, 1, 3))
    out = linear(reshape(mixed, (batch, count, dim)), params.wo, params.bo)
    return (out, weights) if return_weights else out
