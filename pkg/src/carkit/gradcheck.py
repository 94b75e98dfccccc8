"""Finite-difference verification of every analytic gradient in the package.

Each suite draws random 64-bit instances, contracts the operator's output
with a random cotangent to get a scalar, and compares analytic gradients
against central differences. The error of a gradient block is
``max |analytic - numeric| / max(max |analytic|, max |numeric|)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import cubic
from .layers import Conv2d, LeakyReLU, PixelShuffle, ResidualBlock
from .losses import l1_loss, offset_reg, partial_tv
from .models import ResamplerNet, SRNet, Topology
from .pipeline import CARModel
from .quantizer import QuantizerConfig, quantize_backward, soft_round
from .resampler import (
    ResampleGeometry,
    downscale_backward,
    downscale_forward,
    normalize_kernels,
    sample_positions,
)
from .losses import LossWeights

TOLERANCE = 1e-5


@dataclass
class CheckResult:
    name: str
    instances: int
    max_error: float

    @property
    def passed(self) -> bool:
        return self.max_error < TOLERANCE


def block_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = max(np.max(np.abs(analytic)), np.max(np.abs(numeric)))
    if scale == 0:
        return 0.0
    return float(np.max(np.abs(analytic - numeric)) / scale)


def numeric_grad(f: Callable[[], float], x: np.ndarray, h: float, indices=None) -> np.ndarray:
    """Central differences of ``f`` w.r.t. the entries of ``x`` (perturbed in place)."""
    flat = x.reshape(-1)
    idx = range(flat.size) if indices is None else indices
    out = np.zeros(flat.size)
    for k in idx:
        old = flat[k]
        flat[k] = old + h
        fp = f()
        flat[k] = old - h
        fm = f()
        flat[k] = old
        out[k] = (fp - fm) / (2 * h)
    return out.reshape(x.shape)


def _pick(rng, size, limit):
    if size <= limit:
        return None
    return rng.choice(size, limit, replace=False)


def _masked(a, indices):
    if indices is None:
        return a
    return a.reshape(-1)[indices]


def _away_from_lattice(geom, dX, dY, rng, margin=1e-3):
    """Resample offsets until every tap position is at least ``margin`` from integer lines."""
    for _ in range(100):
        U, V = sample_positions(dX[None], dY[None], geom)
        fu = np.abs(U - np.round(U))
        fv = np.abs(V - np.round(V))
        bad = (fu < margin) | (fv < margin)
        if not bad.any():
            return dX, dY
        dX[bad[0]] = rng.uniform(-0.7, 0.7, bad.sum())
        dY[bad[0]] = rng.uniform(-0.7, 0.7, bad.sum())
    raise RuntimeError("could not place taps away from lattice lines")


def check_resampler(rng, size: int = 8, instances: int = 12, corrupt: bool = False) -> list[CheckResult]:
    errs = {"K": 0.0, "dX": 0.0, "dY": 0.0}
    h = 1e-4
    for t in range(instances):
        s = [1, 2, 4][t % 3] if size >= 4 else 1
        s = min(s, size)
        while size % s:
            s //= 2
        mdim = [2, 3 * s][t % 2]
        geom = ResampleGeometry(s, mdim, mdim)
        H = size
        C = 3 if t % 2 == 0 else 1
        hr = rng.random((H, H, C))
        raw = rng.normal(size=(H // s, H // s, mdim, mdim))
        K, _ = normalize_kernels(raw)
        dX = rng.uniform(-0.7, 0.7, K.shape)
        dY = rng.uniform(-0.7, 0.7, K.shape)
        dX, dY = _away_from_lattice(geom, dX, dY, rng)
        cot = rng.normal(size=(H // s, H // s, C))

        def f():
            return float(np.sum(downscale_forward(hr, K, dX, dY, geom)[0] * cot))

        _, tape = downscale_forward(hr, K, dX, dY, geom)
        gK, gX, gY = downscale_backward(cot, tape)
        if corrupt:
            gX = gX * 1.01
        for name, x, g in (("K", K, gK), ("dX", dX, gX), ("dY", dY, gY)):
            idx = _pick(rng, x.size, 200)
            errs[name] = max(errs[name], block_error(_masked(g, idx), _masked(numeric_grad(f, x, h, idx), idx)))
    return [CheckResult(f"downscale grad {k}", instances, v) for k, v in errs.items()]


def check_normalization(rng, instances: int = 6) -> list[CheckResult]:
    out = []
    for mode in ("softmax", "sum"):
        worst = 0.0
        geom = ResampleGeometry(2, 2, 3, normalization=mode)
        for _ in range(instances):
            raw = rng.normal(size=(2, 2, 2, 3)) if mode == "softmax" else rng.uniform(0.5, 1.5, (2, 2, 2, 3))
            cot = rng.normal(size=raw.shape)

            def f():
                return float(np.sum(normalize_kernels(raw, geom)[0] * cot))

            _, back = normalize_kernels(raw, geom)
            worst = max(worst, block_error(back(cot), numeric_grad(f, raw, 1e-6)))
        out.append(CheckResult(f"kernel normalisation ({mode})", instances, worst))
    return out


def check_quantizer(rng, instances: int = 6) -> list[CheckResult]:
    worst = 0.0
    for t in range(instances):
        cfg = QuantizerConfig(alpha=[0.0, 0.25, 0.5, 0.9][t % 4])
        v = rng.random(20)
        cot = rng.normal(size=20)

        # composite [0,1] -> x255 -> soft round -> /255; the two rescalings cancel
        def f():
            return float(np.sum(soft_round(v * 255.0, cfg.alpha) / 255.0 * cot))

        worst = max(worst, block_error(quantize_backward(cot, v * 255.0, cfg), numeric_grad(f, v, 1e-7)))
    return [CheckResult("quantizer soft-round backward", instances, worst)]


def check_losses(rng, instances: int = 6) -> list[CheckResult]:
    res = {"l1": 0.0, "offset_reg": 0.0, "offset_reg (eta in sqrt)": 0.0, "partial_tv": 0.0}
    h = 1e-6
    for _ in range(instances):
        hr = rng.random((4, 4, 3))
        sr = hr + rng.choice([-1, 1], hr.shape) * rng.uniform(0.01, 0.2, hr.shape)
        res["l1"] = max(res["l1"], block_error(l1_loss(sr, hr)[1], numeric_grad(lambda: l1_loss(sr, hr)[0], sr, h)))

        dX = rng.normal(size=(3, 3, 3, 3))
        dY = rng.normal(size=(3, 3, 3, 3))
        for inside, key in ((False, "offset_reg"), (True, "offset_reg (eta in sqrt)")):
            _, gx, gy = offset_reg(dX, dY, 1.0, inside)
            nx = numeric_grad(lambda: offset_reg(dX, dY, 1.0, inside)[0], dX, h)
            ny = numeric_grad(lambda: offset_reg(dX, dY, 1.0, inside)[0], dY, h)
            res[key] = max(res[key], block_error(gx, nx), block_error(gy, ny))

        K = rng.uniform(0.1, 1.0, dX.shape)
        _, gx, gy, gk = partial_tv(dX, dY, K)
        f = lambda: partial_tv(dX, dY, K)[0]  # noqa: E731
        res["partial_tv"] = max(res["partial_tv"], block_error(gx, numeric_grad(f, dX, h)),
                                block_error(gy, numeric_grad(f, dY, h)), block_error(gk, numeric_grad(f, K, h)))
    return [CheckResult(f"loss {k}", instances, v) for k, v in res.items()]


def _layer_check(layer, x, rng, h=1e-6):
    """Input and parameter gradients of a single layer."""
    y = layer.forward(x)
    cot = rng.normal(size=y.shape)
    layer.zero_grad()
    gx = layer.backward(cot)

    def f():
        return float(np.sum(layer.forward(x) * cot))

    errs = [block_error(gx, numeric_grad(f, x, h))]
    for _, p in layer.named_params():
        idx = _pick(rng, p.value.size, 40)
        errs.append(block_error(_masked(p.grad, idx), _masked(numeric_grad(f, p.value, h, idx), idx)))
    return max(errs)


def check_layers(rng, size: int = 6, instances: int = 3) -> list[CheckResult]:
    res = {}
    for t in range(instances):
        x = rng.normal(size=(2, size, size + 1, 3))
        for name, layer in (
            ("conv 3x3 stride 1", Conv2d(3, 4, 3, rng=rng)),
            ("conv 3x3 stride 2", Conv2d(3, 4, 3, stride=2, rng=rng)),
            ("conv 1x1", Conv2d(3, 5, 1, rng=rng)),
            ("leaky relu", LeakyReLU(0.2)),
            ("residual block", ResidualBlock(3, rng=rng, branch_scale=1.0)),
        ):
            if isinstance(layer, Conv2d):
                layer.bias.value[...] = rng.normal(size=layer.bias.value.shape)
            res[name] = max(res.get(name, 0.0), _layer_check(layer, x.copy(), rng))
        ps = PixelShuffle(2)
        res["pixel shuffle"] = max(res.get("pixel shuffle", 0.0), _layer_check(ps, rng.normal(size=(1, 3, 2, 8)), rng))

        lr = rng.random((size, size + 1, 3))
        cot = rng.normal(size=(2 * size, 2 * size + 2, 3))
        g = cubic.bicubic_upscale_backward(cot, 2)
        n = numeric_grad(lambda: float(np.sum(cubic.bicubic_upscale(lr, 2) * cot)), lr, 1e-6)
        res["bicubic upscale"] = max(res.get("bicubic upscale", 0.0), block_error(g, n))
    return [CheckResult(f"layer {k}", instances, v) for k, v in res.items()]


def _param_check(params, f, rng, per_tensor=4, h=1e-6):
    worst = 0.0
    for _, p in params:
        idx = _pick(rng, p.value.size, per_tensor)
        worst = max(worst, block_error(_masked(p.grad, idx), _masked(numeric_grad(f, p.value, h, idx), idx)))
    return worst


def check_networks(rng, size: int = 8, instances: int = 2) -> list[CheckResult]:
    topo = Topology(base=4, cap=8, n_res=1, head_ch=4, sr_feats=4, sr_res=1)
    res = {"resampler net": 0.0, "sr net": 0.0, "end-to-end pipeline": 0.0}
    for t in range(instances):
        s = 2 if size >= 4 else 1
        geom = ResampleGeometry(s, 2, 2)
        net = ResamplerNet(geom, topo, seed=int(rng.integers(1 << 30)))
        for _, p in net.all_named_params():
            p.value[...] = rng.normal(scale=0.3, size=p.value.shape)
        hr = rng.random((1, size, size, 3))
        c_raw, c_x, c_y = (rng.normal(size=(1, size // s, size // s, 2, 2)) for _ in range(3))

        def f_net():
            raw, dX, dY = net.forward(hr)
            return float(np.sum(raw * c_raw) + np.sum(dX * c_x) + np.sum(dY * c_y))

        f_net()
        net.zero_grad()
        net.backward(c_raw, c_x, c_y)
        res["resampler net"] = max(res["resampler net"], _param_check(net.all_named_params(), f_net, rng))

        sr = SRNet(2, topo, seed=int(rng.integers(1 << 30)))
        lr = rng.random((1, size // 2, size // 2, 3))
        cot = rng.normal(size=(1, size, size, 3))
        sr.forward(lr)
        sr.zero_grad()
        glr = sr.backward(cot)
        f_sr = lambda: float(np.sum(sr.forward(lr) * cot))  # noqa: E731
        res["sr net"] = max(res["sr net"], _param_check(sr.named_params(), f_sr, rng),
                            block_error(glr, numeric_grad(f_sr, lr, 1e-6)))

        model = CARModel(geom, topo, seed=int(rng.integers(1 << 30)), quant=QuantizerConfig(enabled=False))
        for _, p in model.all_named_params():
            p.value[...] = rng.normal(scale=0.2, size=p.value.shape)
        w = LossWeights(lam=0.1, gamma=0.01)
        model.zero_grad()
        model.loss_and_grad(hr, w)
        f_model = lambda: model.loss_and_grad(hr, w)["loss"]  # noqa: E731
        grads = {k: p.grad.copy() for k, p in model.all_named_params()}
        worst = 0.0
        for k, p in model.all_named_params():
            idx = _pick(rng, p.value.size, 4)
            num = numeric_grad(f_model, p.value, 1e-6, idx)
            worst = max(worst, block_error(_masked(grads[k], idx), _masked(num, idx)))
        res["end-to-end pipeline"] = max(res["end-to-end pipeline"], worst)
    return [CheckResult(k, instances, v) for k, v in res.items()]


def run_all(seed: int = 0, size: int = 8, corrupt: bool = False) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    size = max(size, 2)
    return (check_resampler(rng, size, corrupt=corrupt) + check_normalization(rng) + check_quantizer(rng)
            + check_losses(rng) + check_layers(rng, max(size // 2, 2)) + check_networks(rng, size))
