"""Separable cubic resampling (Keys kernel, a = -0.5) as explicit linear maps.

Both directions use the pixel-centre convention
``hr = (lr + 0.5) * scale - 0.5`` and clamp-to-edge padding. Since each
map is a matrix, the backward pass of upscaling is simply its transpose.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np

A = -0.5


def cubic(t):
    t = np.abs(np.asarray(t, dtype=np.float64))
    t2, t3 = t * t, t * t * t
    near = (A + 2) * t3 - (A + 3) * t2 + 1
    far = A * t3 - 5 * A * t2 + 8 * A * t - 4 * A
    return np.where(t <= 1, near, np.where(t < 2, far, 0.0))


@lru_cache(maxsize=64)
def upscale_matrix(size: int, scale: int) -> np.ndarray:
    """``(size * scale, size)`` interpolation matrix along one axis."""
    out = np.zeros((size * scale, size))
    for X in range(size * scale):
        p = (X + 0.5) / scale - 0.5
        base = int(np.floor(p))
        for k in range(base - 1, base + 3):
            out[X, min(max(k, 0), size - 1)] += cubic(p - k)
    out.setflags(write=False)
    return out


@lru_cache(maxsize=64)
def downscale_matrix(size: int, scale: int) -> np.ndarray:
    """``(size // scale, size)`` antialiased cubic decimation matrix (kernel stretched by ``scale``)."""
    n = size // scale
    out = np.zeros((n, size))
    for x in range(n):
        u = (x + 0.5) * scale - 0.5
        lo = int(np.floor(u - 2 * scale))
        for X in range(lo, int(np.ceil(u + 2 * scale)) + 1):
            out[x, min(max(X, 0), size - 1)] += cubic((X - u) / scale)
    out /= out.sum(axis=1, keepdims=True)
    out.setflags(write=False)
    return out


def _apply(rows: np.ndarray, cols: np.ndarray, img: np.ndarray) -> np.ndarray:
    img = np.asarray(img)
    rows = rows.astype(img.dtype, copy=False)
    cols = cols.astype(img.dtype, copy=False)
    if img.ndim == 3:
        return np.einsum("Xh,hwc,Yw->XYc", rows, img, cols, optimize=True)
    return np.einsum("Xh,nhwc,Yw->nXYc", rows, img, cols, optimize=True)


def bicubic_upscale(lr: np.ndarray, scale: int) -> np.ndarray:
    """Upscale ``(H, W, C)`` or ``(N, H, W, C)`` by an integer factor."""
    h, w = lr.shape[-3], lr.shape[-2]
    return _apply(upscale_matrix(h, scale), upscale_matrix(w, scale), lr)


def bicubic_upscale_backward(grad_hr: np.ndarray, scale: int) -> np.ndarray:
    """Adjoint of :func:`bicubic_upscale`."""
    H, W = grad_hr.shape[-3], grad_hr.shape[-2]
    return _apply(upscale_matrix(H // scale, scale).T, upscale_matrix(W // scale, scale).T, grad_hr)


def bicubic_downscale(hr: np.ndarray, scale: int) -> np.ndarray:
    """Baseline antialiased cubic downscaling; extents must be divisible by ``scale``."""
    H, W = hr.shape[-3], hr.shape[-2]
    if H % scale or W % scale:
        raise ValueError(f"{H}x{W} not divisible by {scale}")
    return _apply(downscale_matrix(H, scale), downscale_matrix(W, scale), hr)
