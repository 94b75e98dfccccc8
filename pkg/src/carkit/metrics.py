"""PSNR / SSIM on the Y channel and RGB PSNR, computed in the byte domain."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import cubic
from .image import rgb_to_y, to_bytes
from .quantizer import quantize_forward

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
DATA_RANGE = 255.0


def psnr(a: np.ndarray, b: np.ndarray, border: int = 0) -> float:
    """PSNR in dB between two [0, 1] images after rounding both to bytes.

    ``border`` pixels are cropped from every side. Identical inputs give ``inf``.
    """
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if border and 2 * border >= min(a.shape[0], a.shape[1]):
        raise ValueError(f"border {border} too large for {a.shape[0]}x{a.shape[1]} image")
    x = to_bytes(a).astype(np.float64)
    y = to_bytes(b).astype(np.float64)
    if border:
        x = x[border:-border, border:-border]
        y = y[border:-border, border:-border]
    mse = np.mean((x - y) ** 2)
    if mse == 0:
        return math.inf
    return float(10.0 * np.log10(DATA_RANGE ** 2 / mse))


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2
    g = np.exp(-(r * r) / (2 * sigma * sigma))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    k = g.size
    rows = sliding_window_view(img, k, axis=0) @ g
    return sliding_window_view(rows, k, axis=1) @ g


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Mean SSIM of two single-channel images (11x11 Gaussian window, valid region)."""
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.ndim == 3:
        if a.shape[2] != 1:
            raise ValueError("ssim expects single-channel images")
        a, b = a[:, :, 0], b[:, :, 0]
    if min(a.shape) < SSIM_WINDOW:
        raise ValueError(f"images must be at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {a.shape}")
    x = to_bytes(a).astype(np.float64)
    y = to_bytes(b).astype(np.float64)
    g = gaussian_window()
    c1 = (SSIM_K1 * DATA_RANGE) ** 2
    c2 = (SSIM_K2 * DATA_RANGE) ** 2
    mx, my = _filter_valid(x, g), _filter_valid(y, g)
    sxx = _filter_valid(x * x, g) - mx * mx
    syy = _filter_valid(y * y, g) - my * my
    sxy = _filter_valid(x * y, g) - mx * my
    num = (2 * mx * my + c1) * (2 * sxy + c2)
    den = (mx * mx + my * my + c1) * (sxx + syy + c2)
    return float(np.mean(num / den))


@dataclass
class MetricReport:
    name: str
    psnr_y: float
    ssim_y: float
    psnr_rgb: float
    border: int

    def to_json(self) -> str:
        return json.dumps(_jsonable(asdict(self)), sort_keys=True)


def _jsonable(d: dict) -> dict:
    # JSON has no infinity; keep the sentinel as a string
    return {k: ("inf" if isinstance(v, float) and math.isinf(v) else v) for k, v in d.items()}


def measure(hr: np.ndarray, sr: np.ndarray, scale: int, name: str = "") -> MetricReport:
    """Y-channel PSNR/SSIM with a ``scale``-pixel border crop plus full-frame RGB PSNR."""
    hr_b = to_bytes(hr) / 255.0
    sr_b = to_bytes(sr) / 255.0
    if hr.shape[2] == 3:
        hy, sy = rgb_to_y(hr_b), rgb_to_y(sr_b)
    else:
        hy, sy = hr_b, sr_b
    if scale:
        hy_c, sy_c = hy[scale:-scale, scale:-scale], sy[scale:-scale, scale:-scale]
    else:
        hy_c, sy_c = hy, sy
    return MetricReport(name=name, psnr_y=psnr(hy, sy, border=scale), ssim_y=ssim(hy_c, sy_c),
                        psnr_rgb=psnr(hr, sr), border=scale)


def evaluate_pair(hr: np.ndarray, model, upscaler: str | None = None, name: str = "") -> MetricReport:
    """CAR-downscale ``hr`` through the export path, upscale, and measure.

    ``model`` is a :class:`carkit.pipeline.CARModel`; ``upscaler`` may force
    ``"bicubic"`` even when the model carries a learned SR head.
    """
    s = model.geom.scale
    if hr.shape[0] % s or hr.shape[1] % s:
        raise ValueError(f"{hr.shape[0]}x{hr.shape[1]} image not divisible by scale {s}")
    lr = model.downscale(hr, quantize=True)
    if upscaler == "bicubic" or (upscaler is None and model.sr_net is None):
        sr = cubic.bicubic_upscale(lr, s)
    elif model.sr_net is not None:
        sr = model.upscale(lr)
    else:
        raise ValueError("checkpoint has no learned upscaler")
    return measure(hr, np.asarray(sr, dtype=np.float64), s, name)


def evaluate_bicubic_baseline(hr: np.ndarray, scale: int, name: str = "") -> MetricReport:
    """Bicubic-down, quantise, bicubic-up reference."""
    lr = quantize_forward(cubic.bicubic_downscale(hr, scale))
    return measure(hr, cubic.bicubic_upscale(lr, scale), scale, name)


def aggregate(reports: list[MetricReport]) -> dict:
    def mean(key):
        vals = [getattr(r, key) for r in reports]
        return float(np.mean(vals)) if vals else float("nan")

    return _jsonable({"name": "aggregate", "count": len(reports), "psnr_y": mean("psnr_y"),
                      "ssim_y": mean("ssim_y"), "psnr_rgb": mean("psnr_rgb"),
                      "border": reports[0].border if reports else 0})
