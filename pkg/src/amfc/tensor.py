"""Dense float64 kernels: convolution, pooling, activations and resizing.

Tensors are plain ``numpy.ndarray`` objects of dtype float64.  Single-sample
functions take channel-first ``(C, H, W)`` arrays; the ``*_batch`` variants
take ``(N, C, H, W)`` and additionally return what the backward pass needs.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigurationError, DimensionError, NumericError


def as_tensor(x, ndim=None, name="input"):
    arr = np.asarray(x, dtype=np.float64)
    if ndim is not None and arr.ndim != ndim:
        raise DimensionError(f"{name} must have {ndim} dimensions, got shape {arr.shape}")
    if any(d < 1 for d in arr.shape):
        raise DimensionError(f"{name} has an empty dimension: {arr.shape}")
    return arr


def conv_output_size(size, kernel, stride, padding):
    span = size + 2 * padding - kernel
    if kernel > size + 2 * padding or span % stride:
        raise ConfigurationError(
            f"kernel {kernel}, stride {stride}, padding {padding} do not tile an input of size {size}"
        )
    return span // stride + 1


def _im2col(x, k, stride, padding):
    """(N, C, H, W) -> ((N*H'*W'), C*k*k) patch matrix."""
    n, c, h, w = x.shape
    h_out = conv_output_size(h, k, stride, padding)
    w_out = conv_output_size(w, k, stride, padding)
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * h_out * w_out, c * k * k)
    return cols, h_out, w_out


def conv2d_batch(x, kernels, bias, stride=1, padding=0):
    """Batched convolution. Returns ``(out, cache)``; cache feeds :func:`conv2d_backward`."""
    x = as_tensor(x, 4)
    kernels = as_tensor(kernels, 4, "kernels")
    bias = np.asarray(bias, dtype=np.float64)
    c_out, c_in, k, k2 = kernels.shape
    if k != k2:
        raise DimensionError(f"kernels must be square, got {k}x{k2}")
    if x.shape[1] != c_in:
        raise DimensionError(f"input has {x.shape[1]} channels but kernels expect {c_in}")
    if bias.shape != (c_out,):
        raise DimensionError(f"bias shape {bias.shape} does not match {c_out} output channels")
    if stride < 1 or padding < 0:
        raise ConfigurationError("stride must be >= 1 and padding >= 0")
    cols, h_out, w_out = _im2col(x, k, stride, padding)
    out = cols @ kernels.reshape(c_out, -1).T + bias
    out = out.reshape(x.shape[0], h_out, w_out, c_out).transpose(0, 3, 1, 2)
    return np.ascontiguousarray(out), (cols, x.shape, kernels, stride, padding)


def conv2d_backward(dout, cache):
    """Gradients ``(dx, dkernels, dbias)`` of a batched convolution."""
    cols, x_shape, kernels, stride, padding = cache
    n, c, h, w = x_shape
    c_out, _, k, _ = kernels.shape
    h_out, w_out = dout.shape[2], dout.shape[3]
    dflat = dout.transpose(0, 2, 3, 1).reshape(-1, c_out)
    dkernels = (dflat.T @ cols).reshape(kernels.shape)
    dbias = dflat.sum(axis=0)
    dcols = (dflat @ kernels.reshape(c_out, -1)).reshape(n, h_out, w_out, c, k, k)
    dx = np.zeros((n, c, h + 2 * padding, w + 2 * padding))
    for i in range(k):
        for j in range(k):
            dx[:, :, i:i + stride * h_out:stride, j:j + stride * w_out:stride] += (
                dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            )
    if padding:
        dx = dx[:, :, padding:-padding, padding:-padding]
    return dx, dkernels, dbias


def conv2d(x, kernels, bias, stride=1, padding=0):
    """Convolve a ``(C_in, H, W)`` input with ``(C_out, C_in, k, k)`` kernels plus bias.

    Windows are zero-padded by ``padding`` on every side; each output element
    is the dot product of a kernel with its window.
    """
    x = as_tensor(x, 3)
    out, _ = conv2d_batch(x[None], kernels, bias, stride, padding)
    return out[0]


def maxpool2_batch(x):
    """2x2 / stride-2 max pooling over the last two axes. Returns ``(out, mask)``."""
    x = np.asarray(x, dtype=np.float64)
    h, w = x.shape[-2:]
    if h % 2 or w % 2:
        raise DimensionError(f"maxpool2 needs even spatial dims, got {h}x{w}")
    blocks = x.reshape(*x.shape[:-2], h // 2, 2, w // 2, 2)
    out = blocks.max(axis=(-3, -1))
    # first maximal element of each window takes the whole gradient
    flat = blocks.swapaxes(-3, -2).reshape(*x.shape[:-2], h // 2, w // 2, 4)
    arg = flat.argmax(axis=-1)
    mask = np.zeros_like(flat)
    np.put_along_axis(mask, arg[..., None], 1.0, axis=-1)
    mask = mask.reshape(*x.shape[:-2], h // 2, w // 2, 2, 2).swapaxes(-3, -2).reshape(x.shape)
    return out, mask


def maxpool2_backward(dout, mask):
    up = np.repeat(np.repeat(dout, 2, axis=-2), 2, axis=-1)
    return up * mask


def maxpool2(x):
    """Max over non-overlapping 2x2 windows of a ``(C, H, W)`` tensor."""
    x = as_tensor(x, 3)
    h, w = x.shape[1:]
    if h % 2 or w % 2:
        raise DimensionError(f"maxpool2 needs even spatial dims, got {h}x{w}")
    return x.reshape(x.shape[0], h // 2, 2, w // 2, 2).max(axis=(2, 4))


def relu(x):
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise NumericError("relu input contains non-finite values")
    return np.maximum(x, 0.0)


def softmax(x, axis=-1):
    """Numerically stable softmax along ``axis`` (max-subtracted)."""
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise NumericError("softmax input contains non-finite values")
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def interpolation_matrix(size_in, size_out):
    """Corner-aligned linear interpolation weights, shape ``(size_out, size_in)``."""
    if size_in < 1 or size_out < 1:
        raise DimensionError(f"resize sizes must be >= 1, got {size_in} -> {size_out}")
    m = np.zeros((size_out, size_in))
    if size_in == 1 or size_out == 1:
        m[:, 0] = 1.0
        return m
    pos = np.arange(size_out) * (size_in - 1) / (size_out - 1)
    lo = np.minimum(np.floor(pos).astype(int), size_in - 1)
    hi = np.minimum(lo + 1, size_in - 1)
    frac = pos - lo
    rows = np.arange(size_out)
    m[rows, lo] += 1.0 - frac
    m[rows, hi] += frac
    return m


def resize_bilinear(x, out_h, out_w):
    """Bilinear resize of the last two axes with corner-aligned sampling.

    Leading axes are treated as a batch, so a ``(K, H, W)`` stack of maps is
    resized in one call.  Same-size resizing returns the input unchanged.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim < 2 or any(d < 1 for d in x.shape):
        raise DimensionError(f"resize needs a non-empty 2-D (or stacked) input, got {x.shape}")
    h, w = x.shape[-2:]
    if (h, w) == (out_h, out_w):
        return x.copy()
    rh = interpolation_matrix(h, out_h)
    rw = interpolation_matrix(w, out_w)
    return np.matmul(np.matmul(rh, x), rw.T)
