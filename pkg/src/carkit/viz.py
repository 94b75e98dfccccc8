"""Render predicted kernels and offsets as images."""

from __future__ import annotations

import colorsys

import numpy as np


def central_kernel_maps(K: np.ndarray) -> list[tuple[tuple[int, int], np.ndarray]]:
    """Grayscale maps of the central 3x3 kernel elements.

    ``K`` is ``(h, w, m, n)``. Each map is ``(h, w, 1)`` in [0, 1], linearly
    scaled by the largest absolute weight across the nine maps so maps are
    comparable with each other. Uniform kernels give flat maps.
    """
    m, n = K.shape[-2:]
    ci, cj = m // 2, n // 2
    idx = [(i, j) for i in range(max(ci - 1, 0), min(ci + 2, m)) for j in range(max(cj - 1, 0), min(cj + 2, n))]
    stack = np.stack([K[:, :, i, j] for i, j in idx])
    scale = np.abs(stack).max()
    if scale == 0:
        scale = 1.0
    # signed weights (sum normalisation) map to [0, 1] around mid-gray
    lo = 0.0 if stack.min() >= 0 else -scale
    out = (stack - lo) / (scale - lo)
    return [(ij, np.clip(out[k], 0.0, 1.0)[:, :, None]) for k, ij in enumerate(idx)]


def offset_map(dX: np.ndarray, dY: np.ndarray, cap: float) -> np.ndarray:
    """Colour-wheel rendering of the mean offset of each kernel.

    Hue encodes direction, saturation the magnitude relative to ``cap``, value
    is 1; zero offsets therefore render white.
    """
    ox = dX.mean(axis=(-2, -1))
    oy = dY.mean(axis=(-2, -1))
    hue = (np.arctan2(oy, ox) / (2 * np.pi)) % 1.0
    sat = np.clip(np.hypot(ox, oy) / cap, 0.0, 1.0)
    hsv_to_rgb = np.vectorize(colorsys.hsv_to_rgb)
    r, g, b = hsv_to_rgb(hue, sat, np.ones_like(hue))
    return np.stack([r, g, b], axis=-1)
