"""Hand-written differentiable layers on NHWC numpy arrays.

Each layer caches what it needs during ``forward`` and consumes that cache
in ``backward``, which returns the input gradient and accumulates
parameter gradients into ``Param.grad``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class Param:
    value: np.ndarray
    grad: np.ndarray = field(init=False)

    def __post_init__(self):
        self.grad = np.zeros_like(self.value)

    def zero_grad(self):
        self.grad[...] = 0


class Layer:
    def named_params(self, prefix: str = "") -> list[tuple[str, Param]]:
        return []

    def zero_grad(self):
        for _, p in self.named_params():
            p.zero_grad()


class CacheError(RuntimeError):
    pass


class Conv2d(Layer):
    """2-D cross-correlation with zero "same" padding and stride 1 or 2.

    Activations are NHWC; the weight is stored as ``(out, in, k, k)``.
    Stride 2 halves the spatial size, rounding up.
    """

    def __init__(self, in_ch: int, out_ch: int, k: int = 3, stride: int = 1, bias: bool = True,
                 rng: np.random.Generator | None = None, dtype=np.float64, init_scale: float = 1.0,
                 input_grad: bool = True):
        if stride not in (1, 2):
            raise ValueError("stride must be 1 or 2")
        self.in_ch, self.out_ch, self.k, self.stride = in_ch, out_ch, k, stride
        self.input_grad = input_grad
        rng = rng if rng is not None else np.random.default_rng(0)
        fan_in = in_ch * k * k
        std = init_scale * np.sqrt(2.0 / fan_in)
        self.weight = Param(np.asarray(rng.normal(0.0, std, (out_ch, in_ch, k, k)), dtype=dtype))
        self.bias = Param(np.zeros(out_ch, dtype=dtype)) if bias else None
        self._cache = None

    def named_params(self, prefix=""):
        out = [(prefix + "weight", self.weight)]
        if self.bias is not None:
            out.append((prefix + "bias", self.bias))
        return out

    def _matrix(self) -> np.ndarray:
        # columns ordered (row tap, column tap, channel) to match the im2col layout
        return self.weight.value.transpose(0, 2, 3, 1).reshape(self.out_ch, -1)

    def forward(self, x: np.ndarray) -> np.ndarray:
        N, H, W, C = x.shape
        if C != self.in_ch:
            raise ValueError(f"conv expects {self.in_ch} input channels, got {C}")
        k, s, p = self.k, self.stride, self.k // 2
        Ho, Wo = (H - 1) // s + 1, (W - 1) // s + 1
        if k == 1:
            cols = x[:, ::s, ::s, :]
        else:
            xp = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)))
            cols = np.concatenate([xp[:, a:a + s * (Ho - 1) + 1:s, b:b + s * (Wo - 1) + 1:s, :]
                                   for a in range(k) for b in range(k)], axis=-1)
        cols = cols.reshape(N * Ho * Wo, -1)
        out = cols @ self._matrix().T
        if self.bias is not None:
            out += self.bias.value
        self._cache = (cols, x.shape, Ho, Wo)
        return out.reshape(N, Ho, Wo, self.out_ch)

    def backward(self, g: np.ndarray) -> np.ndarray | None:
        if self._cache is None:
            raise CacheError("backward called without a matching forward")
        cols, xshape, Ho, Wo = self._cache
        self._cache = None
        k, s, p = self.k, self.stride, self.k // 2
        N, H, W, C = xshape
        gm = g.reshape(-1, self.out_ch)
        gw = gm.T @ cols
        self.weight.grad += gw.reshape(self.out_ch, k, k, C).transpose(0, 3, 1, 2)
        if self.bias is not None:
            self.bias.grad += gm.sum(axis=0)
        if not self.input_grad:
            return None
        dcols = (gm @ self._matrix()).reshape(N, Ho, Wo, k, k, C)
        dxp = np.zeros((N, H + 2 * p, W + 2 * p, C), dtype=dcols.dtype)
        for a in range(k):
            for b in range(k):
                dxp[:, a:a + s * (Ho - 1) + 1:s, b:b + s * (Wo - 1) + 1:s, :] += dcols[:, :, :, a, b, :]
        return dxp[:, p:p + H, p:p + W, :] if p else dxp


class LeakyReLU(Layer):
    def __init__(self, slope: float = 0.2):
        self.slope = slope
        self._mask = None

    def forward(self, x):
        self._mask = x >= 0
        return np.where(self._mask, x, self.slope * x)

    def backward(self, g):
        if self._mask is None:
            raise CacheError("backward called without a matching forward")
        mask, self._mask = self._mask, None
        return np.where(mask, g, self.slope * g)


class ResidualBlock(Layer):
    """``x + conv(act(conv(x)))``."""

    def __init__(self, ch: int, slope: float = 0.2, rng=None, dtype=np.float64, branch_scale: float = 0.1):
        self.conv1 = Conv2d(ch, ch, 3, rng=rng, dtype=dtype)
        self.act = LeakyReLU(slope)
        self.conv2 = Conv2d(ch, ch, 3, rng=rng, dtype=dtype, init_scale=branch_scale)

    def named_params(self, prefix=""):
        return self.conv1.named_params(prefix + "conv1.") + self.conv2.named_params(prefix + "conv2.")

    def forward(self, x):
        return x + self.conv2.forward(self.act.forward(self.conv1.forward(x)))

    def backward(self, g):
        return g + self.conv1.backward(self.act.backward(self.conv2.backward(g)))


class PixelShuffle(Layer):
    """Depth-to-space: channel ``c * r^2 + i * r + j`` of pixel ``(h, w)`` lands at ``(h * r + i, w * r + j, c)``."""

    def __init__(self, r: int):
        self.r = r

    def forward(self, x):
        N, H, W, C = x.shape
        r = self.r
        if C % (r * r):
            raise ValueError(f"{C} channels not divisible by r^2 = {r * r}")
        c = C // (r * r)
        return x.reshape(N, H, W, c, r, r).transpose(0, 1, 4, 2, 5, 3).reshape(N, H * r, W * r, c)

    def backward(self, g):
        N, Hr, Wr, c = g.shape
        r = self.r
        H, W = Hr // r, Wr // r
        return g.reshape(N, H, r, W, r, c).transpose(0, 1, 3, 5, 2, 4).reshape(N, H, W, c * r * r)


class Sequential(Layer):
    def __init__(self, layers: list[tuple[str, Layer]]):
        self.layers = layers

    def named_params(self, prefix=""):
        out = []
        for name, layer in self.layers:
            out += layer.named_params(f"{prefix}{name}.")
        return out

    def forward(self, x):
        for _, layer in self.layers:
            x = layer.forward(x)
        return x

    def backward(self, g):
        for _, layer in reversed(self.layers):
            g = layer.backward(g)
        return g
