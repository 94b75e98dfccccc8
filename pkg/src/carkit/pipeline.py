"""The full CAR system: ResamplerNet -> resampler -> quantiser -> upscaler -> loss."""

from __future__ import annotations

import numpy as np

from . import cubic
from .losses import LossWeights, l1_loss, offset_reg, partial_tv, total_objective
from .models import ResamplerNet, SRNet, Topology
from .quantizer import LEVELS, QuantizerConfig, quantize_backward, quantize_forward
from .resampler import ResampleGeometry, downscale_backward, downscale_forward, normalize_kernels


class CARModel:
    def __init__(self, geom: ResampleGeometry, topo: Topology | None = None, rgb_mean=(0.5, 0.5, 0.5),
                 upscaler: str = "bicubic", use_offsets: bool = True, quant: QuantizerConfig | None = None,
                 seed: int = 0, dtype=np.float64):
        if upscaler not in ("bicubic", "learned"):
            raise ValueError(f"unknown upscaler {upscaler!r}")
        self.geom = geom
        self.topo = topo or Topology()
        self.upscaler = upscaler
        self.quant = quant or QuantizerConfig()
        self.dtype = np.dtype(dtype)
        self.resampler_net = ResamplerNet(geom, self.topo, rgb_mean, seed=seed, dtype=dtype, use_offsets=use_offsets)
        self.sr_net = SRNet(geom.scale, self.topo, seed=seed + 1, dtype=dtype) if upscaler == "learned" else None

    @property
    def rgb_mean(self) -> np.ndarray:
        return self.resampler_net.rgb_mean

    @property
    def use_offsets(self) -> bool:
        return self.resampler_net.use_offsets

    def named_params(self):
        """Trainable parameters, in a fixed order."""
        out = [("resampler." + k, p) for k, p in self.resampler_net.named_params()]
        if self.sr_net is not None:
            out += [("sr." + k, p) for k, p in self.sr_net.named_params()]
        return out

    def all_named_params(self):
        out = [("resampler." + k, p) for k, p in self.resampler_net.all_named_params()]
        if self.sr_net is not None:
            out += [("sr." + k, p) for k, p in self.sr_net.named_params()]
        return out

    def zero_grad(self):
        for _, p in self.all_named_params():
            p.zero_grad()

    def fields(self, hr: np.ndarray):
        """Kernels and offsets for a batch ``(N, H, W, 3)``."""
        raw, dX, dY = self.resampler_net.forward(hr.astype(self.dtype))
        K, _ = normalize_kernels(raw, self.geom)
        return K, dX, dY

    def downscale(self, hr: np.ndarray, quantize: bool = True) -> np.ndarray:
        """Export path: CAR downscaling of one image or a batch, quantised by default."""
        single = hr.ndim == 3
        batch = hr[None] if single else hr
        K, dX, dY = self.fields(batch)
        lr, _ = downscale_forward(batch.astype(self.dtype), K, dX, dY, self.geom)
        if quantize:
            lr = quantize_forward(lr)
        return lr[0] if single else lr

    def upscale(self, lr: np.ndarray) -> np.ndarray:
        single = lr.ndim == 3
        batch = lr[None] if single else lr
        if self.sr_net is None:
            sr = cubic.bicubic_upscale(batch.astype(self.dtype), self.geom.scale)
        else:
            sr = self.sr_net.forward(batch)
        return sr[0] if single else sr

    def loss_and_grad(self, hr: np.ndarray, weights: LossWeights, quantize: bool | None = None) -> dict:
        """One forward/backward pass over a batch; parameter gradients are accumulated.

        Returns the loss terms. The partial TV term is summed over each
        image's LR grid and averaged over the batch.
        """
        quantize = self.quant.enabled if quantize is None else quantize
        hr = hr.astype(self.dtype)
        N = hr.shape[0]
        geom = self.geom
        raw, dX, dY = self.resampler_net.forward(hr)
        K, kernel_backward = normalize_kernels(raw, geom)
        lr, tape = downscale_forward(hr, K, dX, dY, geom)
        pre = lr * LEVELS
        lr_q = quantize_forward(lr) if quantize else lr
        if self.sr_net is None:
            sr = cubic.bicubic_upscale(lr_q, geom.scale)
        else:
            sr = self.sr_net.forward(lr_q)

        l1, g_sr = l1_loss(sr, hr)
        if self.use_offsets:
            reg, g_dx_reg, g_dy_reg = offset_reg(dX, dY, weights.eta, weights.eta_inside_sqrt)
            tv, g_dx_tv, g_dy_tv, g_k_tv = partial_tv(dX, dY, K)
            tv /= N
        else:
            reg = offset_reg(dX, dY, weights.eta, weights.eta_inside_sqrt)[0]
            tv = 0.0
        loss = total_objective(l1, reg, tv, weights)

        if self.sr_net is None:
            g_lr = cubic.bicubic_upscale_backward(g_sr, geom.scale)
        else:
            g_lr = self.sr_net.backward(g_sr)
        if quantize:
            g_lr = quantize_backward(g_lr, pre, self.quant)
        g_K, g_dX, g_dY = downscale_backward(g_lr, tape)
        if self.use_offsets:
            g_K = g_K + (weights.gamma / N) * g_k_tv
            g_dX = g_dX + weights.lam * g_dx_reg + (weights.gamma / N) * g_dx_tv
            g_dY = g_dY + weights.lam * g_dy_reg + (weights.gamma / N) * g_dy_tv
        self.resampler_net.backward(kernel_backward(g_K), g_dX, g_dY)
        return {"loss": loss, "l1": l1, "reg": reg, "tv": tv}
