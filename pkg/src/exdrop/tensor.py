"""Dense float32 kernels and the seeded random generator.

Tensors are plain C-contiguous ``numpy.float32`` arrays. Image-like kernels
accept either a single ``C x H x W`` sample or a ``B x C x H x W`` batch.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .exceptions import DimensionError

DTYPE = np.float32


def as_tensor(x):
    return np.ascontiguousarray(x, dtype=DTYPE)


class Rng:
    """Seeded generator backed by numpy's PCG64 bit generator.

    PCG64 output is fixed by the numpy stream-compatibility policy, so a
    given seed yields the same draws on every platform.
    """

    def __init__(self, seed=0):
        self.seed = int(seed)
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    def uniform(self, size=None):
        return self._gen.random(size, dtype=np.float64)

    def normal(self, size=None, std=1.0):
        return self._gen.standard_normal(size, dtype=np.float64) * std

    def bernoulli(self, p, size=None):
        p = np.asarray(p, dtype=np.float64)
        if size is None:
            size = p.shape
        return self.uniform(size) < p

    def permutation(self, n):
        return self._gen.permutation(n)

    def choice(self, n, k):
        """``k`` distinct indices from ``range(n)``."""
        return self._gen.choice(n, size=k, replace=False)

    def spawn(self, key):
        """Independent child generator keyed by ``(seed, key)``."""
        ss = np.random.SeedSequence([self.seed, int(key)])
        child = Rng.__new__(Rng)
        child.seed = self.seed
        child._gen = np.random.Generator(np.random.PCG64(ss))
        return child


def matmul(a, b):
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    return as_tensor(a @ b)


def relu(x):
    return np.maximum(as_tensor(x), DTYPE(0))


def conv_output_size(size, k, stride, pad):
    span = size + 2 * pad - k
    if span < 0 or span % stride:
        raise DimensionError(
            f"conv: size {size} with kernel {k}, stride {stride}, pad {pad} "
            "gives a non-integral output"
        )
    return span // stride + 1


def _batched(x):
    x = as_tensor(x)
    if x.ndim == 3:
        return x[None], True
    if x.ndim != 4:
        raise DimensionError(f"expected C x H x W or B x C x H x W, got {x.shape}")
    return x, False


def im2col(x, kh, kw, stride, pad):
    """Patches of a ``B x C x H x W`` batch as a ``(C*kh*kw) x (B*H'*W')`` matrix."""
    B, C, H, W = x.shape
    Ho = conv_output_size(H, kh, stride, pad)
    Wo = conv_output_size(W, kw, stride, pad)
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    xp = xp.transpose(1, 0, 2, 3)
    cols = np.empty((C, kh, kw, B, Ho, Wo), dtype=DTYPE)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride]
    return cols.reshape(C * kh * kw, B * Ho * Wo), Ho, Wo


def col2im(cols, x_shape, kh, kw, stride, pad):
    """Adjoint of :func:`im2col`: scatter-add patch values back onto the image."""
    B, C, H, W = x_shape
    Ho = conv_output_size(H, kh, stride, pad)
    Wo = conv_output_size(W, kw, stride, pad)
    d = cols.reshape(C, kh, kw, B, Ho, Wo)
    out = np.zeros((C, B, H + 2 * pad, W + 2 * pad), dtype=DTYPE)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += d[:, i, j]
    if pad:
        out = out[:, :, pad:-pad, pad:-pad]
    return np.ascontiguousarray(out.transpose(1, 0, 2, 3))


def _conv_cols(cols, kernels, bias, B, Ho, Wo):
    K = kernels.shape[0]
    out = kernels.reshape(K, -1) @ cols
    out = out.reshape(K, B, Ho, Wo).transpose(1, 0, 2, 3)
    out = out + bias[:, None, None]
    return np.ascontiguousarray(out, dtype=DTYPE)


def conv2d(x, kernels, bias, stride=1, pad=0):
    """Cross-correlation plus per-channel bias."""
    xb, single = _batched(x)
    kernels = as_tensor(kernels)
    bias = as_tensor(bias)
    if kernels.ndim != 4 or kernels.shape[1] != xb.shape[1]:
        raise DimensionError(
            f"conv: kernels {kernels.shape} do not match input channels {xb.shape[1]}"
        )
    if bias.shape != (kernels.shape[0],):
        raise DimensionError(f"conv: bias {bias.shape} for {kernels.shape[0]} kernels")
    K, C, kh, kw = kernels.shape
    cols, Ho, Wo = im2col(xb, kh, kw, stride, pad)
    out = _conv_cols(cols, kernels, bias, xb.shape[0], Ho, Wo)
    return out[0] if single else out


def maxpool2d(x, window, stride):
    """Windowed maximum.

    Returns the pooled tensor and, for every output cell, the flat
    ``h * W + w`` index of its winner within the input plane. Ties go to the
    lowest row-major index.
    """
    xb, single = _batched(x)
    B, C, H, W = xb.shape
    if window > H or window > W:
        raise DimensionError(f"maxpool: window {window} larger than input {H}x{W}")
    Ho = (H - window) // stride + 1
    Wo = (W - window) // stride + 1
    win = sliding_window_view(xb, (window, window), axis=(2, 3))[:, :, ::stride, ::stride]
    win = win[:, :, :Ho, :Wo].reshape(B, C, Ho, Wo, window * window)
    local = win.argmax(axis=-1)
    out = np.take_along_axis(win, local[..., None], axis=-1)[..., 0]
    rows = np.arange(Ho)[:, None] * stride + local // window
    cols = np.arange(Wo)[None, :] * stride + local % window
    idx = rows * W + cols
    out = np.ascontiguousarray(out, dtype=DTYPE)
    if single:
        return out[0], idx[0]
    return out, idx


def unpool(values, idx, in_shape):
    """Scatter-add pooled ``values`` back to their argmax positions."""
    B, C, H, W = in_shape
    v = values.reshape(B * C, -1)
    i = idx.reshape(B * C, -1)
    offsets = (np.arange(B * C) * (H * W))[:, None]
    flat = np.bincount((i + offsets).ravel(), weights=v.ravel(), minlength=B * C * H * W)
    return flat.astype(DTYPE).reshape(in_shape)
