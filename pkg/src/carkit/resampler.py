"""Content-adaptive resampling of an HR image into an LR image.

Every LR pixel ``(x, y)`` owns an ``m x n`` kernel of weights ``K`` and
per-tap offsets ``dX`` (rows) and ``dY`` (columns). The kernel is centred
at the projection of the LR pixel onto the HR grid; each tap samples the
HR image bilinearly at its displaced position and the weighted samples
are summed. The same kernel is applied to every colour channel.

Axis convention: ``u`` and ``dX`` run along rows, ``v`` and ``dY`` along
columns, and the bilinear weight ``alpha`` is the row fraction.

Arrays may carry a leading batch axis: HR images are ``(N, H, W, C)`` and
fields are ``(N, h, w, m, n)``. Unbatched inputs are accepted as well.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np


class ResampleError(ValueError):
    pass


@dataclass(frozen=True)
class ResampleGeometry:
    scale: int
    m: int = 0
    n: int = 0
    offset_unit: float = 0.0
    offset_cap: float = 3.0
    normalization: str = "softmax"
    sum_eps: float = 1e-6

    def __post_init__(self):
        if self.scale < 1:
            raise ResampleError(f"scale must be >= 1, got {self.scale}")
        # defaults follow the scale: 3 LR pixels of support, offsets in LR pixels
        if self.m == 0:
            object.__setattr__(self, "m", 3 * self.scale)
        if self.n == 0:
            object.__setattr__(self, "n", 3 * self.scale)
        if self.offset_unit == 0.0:
            object.__setattr__(self, "offset_unit", float(self.scale))
        if self.m < 1 or self.n < 1:
            raise ResampleError(f"kernel extents must be >= 1, got {self.m}x{self.n}")
        if self.offset_unit <= 0:
            raise ResampleError("offset_unit must be positive")
        if self.offset_cap <= 0:
            raise ResampleError("offset_cap must be positive")
        if self.normalization not in ("softmax", "sum"):
            raise ResampleError(f"unknown normalization {self.normalization!r}")

    @property
    def taps(self) -> int:
        return self.m * self.n

    def to_dict(self) -> dict:
        return {
            "scale": self.scale, "m": self.m, "n": self.n, "offset_unit": self.offset_unit,
            "offset_cap": self.offset_cap, "normalization": self.normalization, "sum_eps": self.sum_eps,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ResampleGeometry":
        return cls(**d)


def project(x, y, scale: int):
    """Centre of LR pixel ``(x, y)`` in HR coordinates."""
    return (x + 0.5) * scale - 0.5, (y + 0.5) * scale - 0.5


def bilinear_sample(img: np.ndarray, u: float, v: float):
    """Sample ``img`` (H x W x C) at real position ``(u, v)`` with clamp-to-edge padding.

    Returns the per-channel value and its partial derivatives with respect
    to ``u`` and ``v``. A coordinate pushed outside the image has zero
    derivative.
    """
    img = np.asarray(img, dtype=np.float64)
    H, W = img.shape[:2]
    r0 = int(np.floor(u))
    c0 = int(np.floor(v))
    a = u - r0
    b = v - c0
    ra, rb = min(max(r0, 0), H - 1), min(max(r0 + 1, 0), H - 1)
    ca, cb = min(max(c0, 0), W - 1), min(max(c0 + 1, 0), W - 1)
    p00, p01 = img[ra, ca], img[ra, cb]
    p10, p11 = img[rb, ca], img[rb, cb]
    value = (1 - a) * (1 - b) * p00 + (1 - a) * b * p01 + a * (1 - b) * p10 + a * b * p11
    du = (1 - b) * (p10 - p00) + b * (p11 - p01)
    dv = (1 - a) * (p01 - p00) + a * (p11 - p10)
    return value, du, dv


def squash_offsets(z: np.ndarray, cap: float):
    """Odd, monotone, saturating map onto ``(-cap, cap)`` with unit slope at 0."""
    t = np.tanh(z / cap)
    return cap * t, 1.0 - t * t


def normalize_kernels(raw: np.ndarray, geom: ResampleGeometry | None = None) -> tuple[np.ndarray, Callable]:
    """Normalise raw kernel scores over the trailing ``m x n`` axes.

    Softmax by default; ``geom.normalization == "sum"`` divides by the raw
    sum plus ``sum_eps`` instead, which allows negative weights. Returns the
    weights and a closure mapping ``grad_K`` to ``grad_raw``.
    """
    mode = geom.normalization if geom is not None else "softmax"
    raw = np.asarray(raw)
    if mode == "softmax":
        z = raw - raw.max(axis=(-2, -1), keepdims=True)
        e = np.exp(z)
        K = e / e.sum(axis=(-2, -1), keepdims=True)

        def backward(grad_K):
            return K * (grad_K - (grad_K * K).sum(axis=(-2, -1), keepdims=True))

        return K, backward

    S = raw.sum(axis=(-2, -1), keepdims=True) + geom.sum_eps
    K = raw / S

    def backward(grad_K):
        return grad_K / S - (grad_K * raw).sum(axis=(-2, -1), keepdims=True) / (S * S)

    return K, backward


@dataclass
class SampleTape:
    """What the backward pass needs from a forward call."""

    K: np.ndarray          # (N, h, w, m, n)
    samples: np.ndarray    # (N, h, w, m, n, C) interpolated HR values
    d_u: np.ndarray        # (N, h, w, m, n, C) d sample / d row position
    d_v: np.ndarray        # (N, h, w, m, n, C) d sample / d column position
    offset_unit: float
    batched: bool

    @property
    def lr_shape(self) -> tuple:
        N, h, w = self.K.shape[:3]
        shape = (N, h, w, self.samples.shape[-1])
        return shape if self.batched else shape[1:]


def sample_positions(dX: np.ndarray, dY: np.ndarray, geom: ResampleGeometry):
    """Absolute HR row/column positions of every tap, shape ``(N, h, w, m, n)``."""
    _, h, w, m, n = dX.shape
    s = geom.scale
    u = ((np.arange(h) + 0.5) * s - 0.5)[:, None, None, None]
    v = ((np.arange(w) + 0.5) * s - 0.5)[None, :, None, None]
    i = (np.arange(m) - m / 2)[:, None]
    j = (np.arange(n) - n / 2)[None, :]
    U = u + i + geom.offset_unit * dX
    V = v + j + geom.offset_unit * dY
    return U, V


def _batch(hr, K, dX, dY):
    hr = np.asarray(hr)
    if hr.ndim == 3:
        return hr[None], np.asarray(K)[None], np.asarray(dX)[None], np.asarray(dY)[None], False
    return hr, np.asarray(K), np.asarray(dX), np.asarray(dY), True


def downscale_forward(hr, K, dX, dY, geom: ResampleGeometry):
    """Resample ``hr`` with per-pixel kernels; returns ``(lr, tape)``."""
    hr, K, dX, dY, batched = _batch(hr, K, dX, dY)
    N, H, W, C = hr.shape
    s = geom.scale
    if H % s or W % s:
        raise ResampleError(f"HR extents {H}x{W} are not divisible by scale {s}")
    expected = (N, H // s, W // s, geom.m, geom.n)
    for name, f in (("K", K), ("dX", dX), ("dY", dY)):
        if f.shape != expected:
            raise ResampleError(f"{name} has shape {f.shape}, expected {expected}")

    U, V = sample_positions(dX, dY, geom)
    r0 = np.floor(U)
    c0 = np.floor(V)
    a = (U - r0)[..., None]
    b = (V - c0)[..., None]
    r0 = r0.astype(np.intp)
    c0 = c0.astype(np.intp)
    ra, rb = np.clip(r0, 0, H - 1), np.clip(r0 + 1, 0, H - 1)
    ca, cb = np.clip(c0, 0, W - 1), np.clip(c0 + 1, 0, W - 1)
    flat = hr.reshape(N * H * W, C)
    ra = (np.arange(N).reshape(N, 1, 1, 1, 1) * H + ra) * W
    rb = (np.arange(N).reshape(N, 1, 1, 1, 1) * H + rb) * W
    p00, p01 = flat[ra + ca], flat[ra + cb]
    p10, p11 = flat[rb + ca], flat[rb + cb]
    samples = (1 - a) * (1 - b) * p00 + (1 - a) * b * p01 + a * (1 - b) * p10 + a * b * p11
    d_u = (1 - b) * (p10 - p00) + b * (p11 - p01)
    d_v = (1 - a) * (p01 - p00) + a * (p11 - p10)

    # sequential accumulation over taps keeps results identical to a scalar loop
    weighted = K[..., None] * samples
    lr = np.zeros((N, H // s, W // s, C), dtype=weighted.dtype)
    for i in range(geom.m):
        for j in range(geom.n):
            lr += weighted[:, :, :, i, j]

    tape = SampleTape(K=K, samples=samples, d_u=d_u, d_v=d_v, offset_unit=geom.offset_unit, batched=batched)
    return (lr if batched else lr[0]), tape


def downscale_backward(grad_lr, tape: SampleTape):
    """Gradients of the resampled image with respect to ``K``, ``dX`` and ``dY``.

    Channel contributions are summed in channel order.
    """
    grad_lr = np.asarray(grad_lr)
    if grad_lr.shape != tape.lr_shape:
        raise ResampleError(f"grad_lr shape {grad_lr.shape} does not match tape output {tape.lr_shape}")
    g = grad_lr if tape.batched else grad_lr[None]
    g = g[:, :, :, None, None, :]
    C = g.shape[-1]
    gs = g[..., 0] * tape.samples[..., 0]
    gu = g[..., 0] * tape.d_u[..., 0]
    gv = g[..., 0] * tape.d_v[..., 0]
    for c in range(1, C):
        gs = gs + g[..., c] * tape.samples[..., c]
        gu = gu + g[..., c] * tape.d_u[..., c]
        gv = gv + g[..., c] * tape.d_v[..., c]
    grad_K = gs
    grad_dX = tape.offset_unit * tape.K * gu
    grad_dY = tape.offset_unit * tape.K * gv
    if not tape.batched:
        return grad_K[0], grad_dX[0], grad_dY[0]
    return grad_K, grad_dX, grad_dY


def downscale_reference(hr, K, dX, dY, geom: ResampleGeometry) -> np.ndarray:
    """Scalar nested-loop resampler for a single image. Slow; used as a test oracle."""
    hr = np.asarray(hr, dtype=np.float64)
    H, W, C = hr.shape
    s = geom.scale
    h, w = H // s, W // s
    out = np.zeros((h, w, C))
    for x in range(h):
        for y in range(w):
            u, v = project(x, y, s)
            for c in range(C):
                acc = 0.0
                for i in range(geom.m):
                    for j in range(geom.n):
                        uu = u + (i - geom.m / 2) + geom.offset_unit * dX[x, y, i, j]
                        vv = v + (j - geom.n / 2) + geom.offset_unit * dY[x, y, i, j]
                        r0 = int(np.floor(uu))
                        c0 = int(np.floor(vv))
                        a = uu - r0
                        b = vv - c0
                        ra, rb = min(max(r0, 0), H - 1), min(max(r0 + 1, 0), H - 1)
                        ca, cb = min(max(c0, 0), W - 1), min(max(c0 + 1, 0), W - 1)
                        sval = ((1 - a) * (1 - b) * hr[ra, ca, c] + (1 - a) * b * hr[ra, cb, c]
                                + a * (1 - b) * hr[rb, ca, c] + a * b * hr[rb, cb, c])
                        acc += K[x, y, i, j] * sval
                out[x, y, c] = acc
    return out
