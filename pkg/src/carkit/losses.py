"""Training objective terms with analytic gradients.

Offset and kernel fields have shape ``(..., h, w, m, n)``; any leading
axes (e.g. a batch axis) are treated as further kernels for the offset
regulariser and as independent images for the partial TV term.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

NORM_SMOOTHING = 1e-8


@dataclass(frozen=True)
class LossWeights:
    lam: float
    gamma: float
    eta: float = 1.0
    eta_inside_sqrt: bool = False

    def __post_init__(self):
        if self.lam < 0 or self.gamma < 0:
            raise ValueError("lambda and gamma must be non-negative")


def _same_shape(*arrays):
    shapes = {np.shape(a) for a in arrays}
    if len(shapes) != 1:
        raise ValueError(f"shape mismatch: {sorted(shapes)}")


def l1_loss(sr: np.ndarray, hr: np.ndarray):
    """Mean absolute error over all pixels and channels, plus its gradient w.r.t. ``sr``."""
    _same_shape(sr, hr)
    diff = sr - hr
    N = diff.size
    return float(np.abs(diff).sum() / N), np.sign(diff) / N


def distance_weights(m: int, n: int) -> np.ndarray:
    """Distance of each tap from the kernel centre, normalised so the corner tap is 1."""
    i = np.arange(m)[:, None] - m / 2
    j = np.arange(n)[None, :] - n / 2
    return np.sqrt(i * i + j * j) / np.sqrt((m / 2) ** 2 + (n / 2) ** 2)


def offset_reg(dX: np.ndarray, dY: np.ndarray, eta: float = 1.0, eta_inside_sqrt: bool = False):
    """Mean over kernels of the weighted total offset distance.

    Per kernel: ``sum_ij eta + |(dX, dY)_ij| * w_ij``. With ``eta_inside_sqrt``
    the regulator is read as a smoothing term instead:
    ``sum_ij sqrt(dX^2 + dY^2 + eta) * w_ij``.
    Returns ``(value, grad_dX, grad_dY)``.
    """
    _same_shape(dX, dY)
    m, n = dX.shape[-2:]
    w = distance_weights(m, n)
    n_kernels = dX.size // (m * n)
    sq = dX * dX + dY * dY
    if eta_inside_sqrt:
        norm = np.sqrt(sq + eta)
        value = (norm * w).sum() / n_kernels
        scale = w / norm / n_kernels
    else:
        value = eta * m * n + (np.sqrt(sq) * w).sum() / n_kernels
        scale = w / np.sqrt(sq + NORM_SMOOTHING ** 2) / n_kernels
    return float(value), dX * scale, dY * scale


def partial_tv(dX: np.ndarray, dY: np.ndarray, K: np.ndarray):
    """Kernel-weighted TV of row offsets across columns and column offsets across rows.

    Each difference between neighbouring LR pixels is weighted by the
    kernel of the left (for ``dX``) or upper (for ``dY``) pixel of the
    pair. No wrap-around. Returns ``(value, grad_dX, grad_dY, grad_K)``.
    """
    _same_shape(dX, dY, K)
    # axes: (..., h, w, m, n); columns are axis -3, rows axis -4
    ddx = dX[..., :, 1:, :, :] - dX[..., :, :-1, :, :]
    ddy = dY[..., 1:, :, :, :] - dY[..., :-1, :, :, :]
    k_left = K[..., :, :-1, :, :]
    k_up = K[..., :-1, :, :, :]
    value = (np.abs(ddx) * k_left).sum() + (np.abs(ddy) * k_up).sum()

    gx = np.sign(ddx) * k_left
    gy = np.sign(ddy) * k_up
    grad_dX = np.zeros_like(dX)
    grad_dX[..., :, 1:, :, :] += gx
    grad_dX[..., :, :-1, :, :] -= gx
    grad_dY = np.zeros_like(dY)
    grad_dY[..., 1:, :, :, :] += gy
    grad_dY[..., :-1, :, :, :] -= gy
    grad_K = np.zeros_like(K)
    grad_K[..., :, :-1, :, :] += np.abs(ddx)
    grad_K[..., :-1, :, :, :] += np.abs(ddy)
    return float(value), grad_dX, grad_dY, grad_K


def total_objective(l1: float, reg: float, tv: float, weights: LossWeights) -> float:
    return l1 + weights.lam * reg + weights.gamma * tv
