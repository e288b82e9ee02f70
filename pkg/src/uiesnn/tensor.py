"""Dense rank-4 kernels: convolution, transposed convolution, max-pool, concat.

Every array handled here is a ``(batch, channels, height, width)`` numpy array
(C order, width fastest). Kernels are pure functions and preserve the input
dtype, so the same code runs in float32 for training and float64 for
gradient checks.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import PreconditionError, ShapeError

Tensor4 = np.ndarray

__all__ = [
    "Tensor4",
    "ConvParams",
    "PoolIndices",
    "check_tensor4",
    "conv2d_forward",
    "conv2d_backward",
    "deconv2d_forward",
    "deconv2d_backward",
    "conv_output_size",
    "deconv_output_size",
    "maxpool2x2",
    "maxpool2x2_backward",
    "concat_channels",
    "concat_channels_backward",
]


def check_tensor4(x, name="tensor"):
    """Return ``x`` as an ndarray, raising ShapeError unless it is rank 4 with all dims >= 1."""
    x = np.asarray(x)
    if x.ndim != 4 or min(x.shape) < 1:
        raise ShapeError(f"{name} must be a rank-4 array with positive dims", x.shape)
    return x


@dataclass
class ConvParams:
    """Weights and geometry of a convolution-type layer.

    For ``conv2d_forward`` the weight has shape ``(out_channels, in_channels, k, k)``.
    ``deconv2d_forward`` uses the same array as the adjoint of that convolution,
    so a deconv mapping ``a -> b`` channels stores a ``(a, b, k, k)`` weight.
    """

    weight: np.ndarray
    bias: np.ndarray
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        w = np.asarray(self.weight)
        if w.ndim != 4 or w.shape[2] != w.shape[3] or w.shape[2] < 1:
            raise ShapeError("weight must have shape (c0, c1, k, k)", w.shape)
        if self.stride < 1 or self.padding < 0:
            raise PreconditionError(f"need stride >= 1 and padding >= 0, got {self.stride}, {self.padding}")

    @property
    def k(self):
        return self.weight.shape[2]


@dataclass
class PoolIndices:
    """Flat ``h * W + w`` index of each output element's winning input element."""

    indices: np.ndarray
    input_shape: tuple


def conv_output_size(size, k, stride, padding):
    return (size + 2 * padding - k) // stride + 1


def deconv_output_size(size, k, stride, padding):
    return (size - 1) * stride + k - 2 * padding


def _nhwc(x, padding=0):
    x = x.transpose(0, 2, 3, 1)
    if padding:
        return np.pad(x, ((0, 0), (padding, padding), (padding, padding), (0, 0)))
    return np.ascontiguousarray(x)


def _im2col(x, k, stride, padding, out_h, out_w):
    """Patch matrix with one row per output pixel and columns ordered (ki, kj, channel)."""
    n, c = x.shape[:2]
    xp = _nhwc(x, padding)
    cols = np.empty((n, out_h, out_w, k, k, c), dtype=x.dtype)
    hspan = stride * (out_h - 1) + 1
    wspan = stride * (out_w - 1) + 1
    for i in range(k):
        for j in range(k):
            cols[:, :, :, i, j, :] = xp[:, i:i + hspan:stride, j:j + wspan:stride, :]
    return cols.reshape(n * out_h * out_w, k * k * c)


def _col2im(cols, shape, k, stride, padding, out_h, out_w):
    """Scatter-add a patch matrix back onto an NCHW tensor of ``shape``."""
    n, c, h, w = shape
    cols = cols.reshape(n, out_h, out_w, k, k, c)
    padded = np.zeros((n, h + 2 * padding, w + 2 * padding, c), dtype=cols.dtype)
    hspan = stride * (out_h - 1) + 1
    wspan = stride * (out_w - 1) + 1
    for i in range(k):
        for j in range(k):
            padded[:, i:i + hspan:stride, j:j + wspan:stride, :] += cols[:, :, :, i, j, :]
    if padding:
        padded = padded[:, padding:padding + h, padding:padding + w, :]
    return np.ascontiguousarray(padded.transpose(0, 3, 1, 2))


def _rows(t):
    """NCHW -> (N*H*W, C) matrix."""
    n, c, h, w = t.shape
    return np.ascontiguousarray(t.transpose(0, 2, 3, 1)).reshape(n * h * w, c)


def _unrows(m, n, h, w):
    return np.ascontiguousarray(m.reshape(n, h, w, -1).transpose(0, 3, 1, 2))


def _check_bias(params, channels):
    if np.shape(params.bias) != (channels,):
        raise ShapeError("bias length must equal output channels", np.shape(params.bias), (channels,))


def conv2d_forward(x, params):
    """Cross-correlate ``x`` with ``params.weight`` and add the bias.

    Output spatial size is ``(H + 2*padding - k) // stride + 1``.
    """
    x = check_tensor4(x, "input")
    w = params.weight
    cout, cin, k, _ = w.shape
    if x.shape[1] != cin:
        raise ShapeError("input channels do not match conv weight", x.shape, w.shape)
    _check_bias(params, cout)
    n, _, h, wd = x.shape
    oh = conv_output_size(h, k, params.stride, params.padding)
    ow = conv_output_size(wd, k, params.stride, params.padding)
    if oh < 1 or ow < 1:
        raise ShapeError("convolution output would be empty", x.shape, w.shape)
    cols = _im2col(x, k, params.stride, params.padding, oh, ow)
    wmat = w.transpose(0, 2, 3, 1).reshape(cout, -1)
    out = cols @ wmat.T
    out += params.bias.astype(out.dtype, copy=False)
    return _unrows(out, n, oh, ow)


def conv2d_backward(grad_out, saved_input, params, input_grad=True):
    """Gradients of ``conv2d_forward`` w.r.t. its input, weight and bias.

    With ``input_grad=False`` the input gradient is skipped and None returned in its place.
    """
    x = check_tensor4(saved_input, "saved_input")
    w = params.weight
    cout, cin, k, _ = w.shape
    n, _, h, wd = x.shape
    oh = conv_output_size(h, k, params.stride, params.padding)
    ow = conv_output_size(wd, k, params.stride, params.padding)
    if np.shape(grad_out) != (n, cout, oh, ow):
        raise ShapeError("grad_out does not match conv output", np.shape(grad_out), (n, cout, oh, ow))
    g = _rows(np.asarray(grad_out))
    cols = _im2col(x, k, params.stride, params.padding, oh, ow)
    grad_weight = (g.T @ cols).reshape(cout, k, k, cin).transpose(0, 3, 1, 2)
    grad_bias = g.sum(axis=0)
    grad_input = None
    if input_grad:
        gcols = g @ w.transpose(0, 2, 3, 1).reshape(cout, -1)
        grad_input = _col2im(gcols, x.shape, k, params.stride, params.padding, oh, ow)
    return grad_input, np.ascontiguousarray(grad_weight), grad_bias


def deconv2d_forward(x, params):
    """Transposed convolution: the exact adjoint of ``conv2d_forward`` plus a bias.

    Output spatial size is ``(H - 1) * stride + k - 2*padding``.
    """
    x = check_tensor4(x, "input")
    w = params.weight
    cin, cout, k, _ = w.shape
    if x.shape[1] != cin:
        raise ShapeError("input channels do not match deconv weight", x.shape, w.shape)
    _check_bias(params, cout)
    n, _, h, wd = x.shape
    oh = deconv_output_size(h, k, params.stride, params.padding)
    ow = deconv_output_size(wd, k, params.stride, params.padding)
    if oh < 1 or ow < 1:
        raise ShapeError("deconvolution output would be empty", x.shape, w.shape)
    cols = _rows(x) @ w.transpose(0, 2, 3, 1).reshape(cin, -1)
    out = _col2im(cols, (n, cout, oh, ow), k, params.stride, params.padding, h, wd)
    out += params.bias.reshape(1, cout, 1, 1).astype(out.dtype, copy=False)
    return out


def deconv2d_backward(grad_out, saved_input, params, input_grad=True):
    """Gradients of ``deconv2d_forward`` w.r.t. its input, weight and bias."""
    x = check_tensor4(saved_input, "saved_input")
    w = params.weight
    cin, cout, k, _ = w.shape
    n, _, h, wd = x.shape
    oh = deconv_output_size(h, k, params.stride, params.padding)
    ow = deconv_output_size(wd, k, params.stride, params.padding)
    if np.shape(grad_out) != (n, cout, oh, ow):
        raise ShapeError("grad_out does not match deconv output", np.shape(grad_out), (n, cout, oh, ow))
    gcols = _im2col(np.asarray(grad_out), k, params.stride, params.padding, h, wd)
    wmat = w.transpose(0, 2, 3, 1).reshape(cin, -1)
    grad_input = _unrows(gcols @ wmat.T, n, h, wd) if input_grad else None
    grad_weight = (_rows(x).T @ gcols).reshape(cin, k, k, cout).transpose(0, 3, 1, 2)
    grad_bias = np.asarray(grad_out).sum(axis=(0, 2, 3))
    return grad_input, np.ascontiguousarray(grad_weight), grad_bias


def maxpool2x2(x):
    """2x2 / stride-2 max pool. Ties go to the first element in row-major order."""
    x = check_tensor4(x, "input")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise PreconditionError(f"maxpool2x2 needs even spatial dims, got {h}x{w}")
    windows = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    arg = windows.argmax(axis=-1)
    out = np.take_along_axis(windows, arg[..., None], axis=-1)[..., 0]
    rows = 2 * np.arange(h // 2).reshape(-1, 1) + arg // 2
    cols = 2 * np.arange(w // 2).reshape(1, -1) + arg % 2
    return out, PoolIndices(rows * w + cols, x.shape)


def maxpool2x2_backward(grad_out, pool):
    """Route each output cotangent to the winning input element; others get zero."""
    n, c, h, w = pool.input_shape
    if np.shape(grad_out) != pool.indices.shape:
        raise ShapeError("grad_out does not match pooled shape", np.shape(grad_out), pool.indices.shape)
    grad = np.zeros((n, c, h * w), dtype=np.asarray(grad_out).dtype)
    np.put_along_axis(grad, pool.indices.reshape(n, c, -1), np.reshape(grad_out, (n, c, -1)), axis=-1)
    return grad.reshape(n, c, h, w)


def concat_channels(a, b):
    """Stack ``a`` then ``b`` along the channel axis."""
    a = check_tensor4(a, "a")
    b = check_tensor4(b, "b")
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ShapeError("concat needs equal batch and spatial dims", a.shape, b.shape)
    return np.concatenate([a, b], axis=1)


def concat_channels_backward(grad_out, a_channels):
    """Split a concat cotangent back into the ``a`` and ``b`` channel ranges."""
    return grad_out[:, :a_channels], grad_out[:, a_channels:]
