"""8-bit quantisation: hard rounding forward, soft-round derivative backward."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .image import round_half_away

LEVELS = 255.0


@dataclass(frozen=True)
class QuantizerConfig:
    alpha: float = 0.5
    enabled: bool = True

    def __post_init__(self):
        if not 0.0 <= self.alpha < 1.0:
            raise ValueError(f"alpha must lie in [0, 1), got {self.alpha}")


def quantize_forward(lr: np.ndarray) -> np.ndarray:
    return round_half_away(np.clip(lr, 0.0, 1.0) * LEVELS) / LEVELS


def soft_round(x, alpha: float):
    """Differentiable stand-in for rounding; only its derivative is used in training."""
    return x - alpha * np.sin(2 * np.pi * x) / (2 * np.pi)


def soft_round_grad(x, alpha: float):
    return 1.0 - alpha * np.cos(2 * np.pi * x)


def quantize_backward(grad_out: np.ndarray, pre_quant: np.ndarray, cfg: QuantizerConfig) -> np.ndarray:
    """Gradient through the quantiser.

    ``pre_quant`` is the pre-rounding tensor in the [0, 255] domain. The
    factor 255 applied before rounding and the 1/255 applied after it
    cancel, leaving only the soft-round derivative.
    """
    grad_out = np.asarray(grad_out)
    pre_quant = np.asarray(pre_quant)
    if grad_out.shape != pre_quant.shape:
        raise ValueError(f"grad shape {grad_out.shape} != input shape {pre_quant.shape}")
    return grad_out * soft_round_grad(pre_quant, cfg.alpha)
