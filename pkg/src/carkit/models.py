"""ResamplerNet (kernel and offset prediction) and a small learned SR head."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .layers import Conv2d, LeakyReLU, Param, PixelShuffle, ResidualBlock, Sequential
from .resampler import ResampleGeometry, squash_offsets


@dataclass
class Topology:
    """Width/depth of both networks. Defaults are desk-scale."""

    base: int = 32
    cap: int = 64
    n_res: int = 3
    head_ch: int = 32
    head_depth: int = 1
    slope: float = 0.2
    sr_feats: int = 32
    sr_res: int = 2

    @classmethod
    def full_scale(cls) -> "Topology":
        """Widths for full-size training; far too slow for CPU experiments."""
        return cls(base=128, cap=128, n_res=5, head_ch=256, head_depth=1)

    def to_dict(self) -> dict:
        return asdict(self)


def _head(in_ch: int, out_ch: int, topo: Topology, rng, dtype, zero_last: bool) -> Sequential:
    layers, c = [], in_ch
    for d in range(topo.head_depth):
        layers += [(f"conv{d}", Conv2d(c, topo.head_ch, 3, rng=rng, dtype=dtype)), (f"act{d}", LeakyReLU(topo.slope))]
        c = topo.head_ch
    last = Conv2d(c, out_ch, 1, rng=rng, dtype=dtype)
    if zero_last:
        last.weight.value[...] = 0
    layers.append(("out", last))
    return Sequential(layers)


class ResamplerNet:
    """Predicts raw kernel scores and squashed offsets for every LR pixel.

    Input images are ``(N, H, W, 3)`` in [0, 1]; the dataset mean is
    subtracted before the trunk. Outputs are shaped ``(N, h, w, m, n)``.
    """

    def __init__(self, geom: ResampleGeometry, topo: Topology | None = None, rgb_mean=(0.5, 0.5, 0.5),
                 seed: int = 0, dtype=np.float64, use_offsets: bool = True):
        s = geom.scale
        if s & (s - 1):
            raise ValueError(f"scale must be a power of two, got {s}")
        self.geom = geom
        self.topo = topo or Topology()
        self.rgb_mean = np.asarray(rgb_mean, dtype=np.float64)
        self.dtype = np.dtype(dtype)
        self.use_offsets = use_offsets
        rng = np.random.default_rng(seed)
        t = self.topo

        trunk, c = [], 3
        if s == 1:
            trunk += [("entry", Conv2d(3, t.base, 3, rng=rng, dtype=dtype, input_grad=False)),
                      ("entry_act", LeakyReLU(t.slope))]
            c = t.base
        out_c = t.base
        for k in range(int(np.log2(s))):
            trunk += [(f"down{k}", Conv2d(c, out_c, 3, stride=2, rng=rng, dtype=dtype, input_grad=bool(trunk))),
                      (f"down{k}_act", LeakyReLU(t.slope))]
            c, out_c = out_c, min(2 * out_c, t.cap)
        for r in range(t.n_res):
            trunk.append((f"res{r}", ResidualBlock(c, t.slope, rng=rng, dtype=dtype)))
        self.trunk = Sequential(trunk)
        signed = geom.normalization == "sum"
        self.kernel_head = _head(c, geom.taps, t, rng, dtype, zero_last=signed)
        if signed:
            # start from a box filter with the normaliser far from zero
            self.kernel_head.layers[-1][1].bias.value[...] = 1.0
        self.offset_head = _head(c, 2 * geom.taps, t, rng, dtype, zero_last=True)
        self._shape = None

    def named_params(self) -> list[tuple[str, Param]]:
        out = self.trunk.named_params("trunk.") + self.kernel_head.named_params("kernel_head.")
        if self.use_offsets:
            out += self.offset_head.named_params("offset_head.")
        return out

    def all_named_params(self) -> list[tuple[str, Param]]:
        return (self.trunk.named_params("trunk.") + self.kernel_head.named_params("kernel_head.")
                + self.offset_head.named_params("offset_head."))

    def zero_grad(self):
        for _, p in self.all_named_params():
            p.zero_grad()

    def forward(self, hr: np.ndarray):
        N, H, W, _ = hr.shape
        s, m, n = self.geom.scale, self.geom.m, self.geom.n
        if H % s or W % s:
            raise ValueError(f"HR extents {H}x{W} not divisible by scale {s}")
        x = (hr - self.rgb_mean).astype(self.dtype)
        feat = self.trunk.forward(x)
        h, w = H // s, W // s
        raw = self.kernel_head.forward(feat).reshape(N, h, w, m, n)
        self._shape = (N, h, w)
        if not self.use_offsets:
            zeros = np.zeros((N, h, w, m, n), dtype=self.dtype)
            self._squash_grad = None
            return raw, zeros, zeros.copy()
        z = self.offset_head.forward(feat)
        off, self._squash_grad = squash_offsets(z, self.geom.offset_cap)
        dX = off[..., :m * n].reshape(N, h, w, m, n)
        dY = off[..., m * n:].reshape(N, h, w, m, n)
        return raw, dX, dY

    def backward(self, grad_raw, grad_dX, grad_dY):
        N, h, w = self._shape
        mn = self.geom.taps
        g_feat = self.kernel_head.backward(grad_raw.reshape(N, h, w, mn))
        if self.use_offsets:
            g_off = np.concatenate([grad_dX.reshape(N, h, w, mn), grad_dY.reshape(N, h, w, mn)], axis=-1)
            g_off = g_off * self._squash_grad
            g_feat = g_feat + self.offset_head.backward(g_off)
        self.trunk.backward(g_feat)


class SRNet:
    """conv -> residual blocks -> global skip -> bias-free conv -> pixel shuffle."""

    def __init__(self, scale: int, topo: Topology | None = None, seed: int = 1, dtype=np.float64):
        t = topo or Topology()
        rng = np.random.default_rng(seed)
        self.scale = scale
        self.dtype = np.dtype(dtype)
        self.head = Conv2d(3, t.sr_feats, 3, rng=rng, dtype=dtype)
        self.body = Sequential([(f"res{r}", ResidualBlock(t.sr_feats, t.slope, rng=rng, dtype=dtype))
                                for r in range(t.sr_res)])
        self.tail = Conv2d(t.sr_feats, 3 * scale * scale, 3, bias=False, rng=rng, dtype=dtype)
        self.shuffle = PixelShuffle(scale)

    def named_params(self):
        return (self.head.named_params("head.") + self.body.named_params("body.")
                + self.tail.named_params("tail."))

    all_named_params = named_params

    def zero_grad(self):
        for _, p in self.named_params():
            p.zero_grad()

    def forward(self, lr: np.ndarray) -> np.ndarray:
        x = lr.astype(self.dtype)
        f0 = self.head.forward(x)
        f = self.body.forward(f0) + f0
        return self.shuffle.forward(self.tail.forward(f))

    def backward(self, grad_sr: np.ndarray) -> np.ndarray:
        g = self.tail.backward(self.shuffle.backward(grad_sr))
        g = self.body.backward(g) + g
        return self.head.backward(g)
