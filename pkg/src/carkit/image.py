"""Image containers, PNG I/O and patch primitives.

Images are plain ``float64`` numpy arrays of shape ``(H, W, C)`` with
``C in {1, 3}`` and nominal range ``[0, 1]``. A single channel means the
image holds luma (Y); three channels mean RGB.
"""

from __future__ import annotations

import os
import tempfile
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

# BT.601 limited-range luma, coefficients in the [0, 255] domain.
_Y_COEFFS = np.array([65.481, 128.553, 24.966])
_Y_OFFSET = 16.0


class ImageError(ValueError):
    """Raised for malformed images or unsupported PNG encodings."""


def check_image(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] not in (1, 3):
        raise ImageError(f"expected an H x W x C array with C in (1, 3), got shape {img.shape}")
    if img.shape[0] < 1 or img.shape[1] < 1:
        raise ImageError(f"image must be at least 1x1, got {img.shape[:2]}")
    return img


def round_half_away(x: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def to_bytes(img: np.ndarray) -> np.ndarray:
    """Map [0, 1] values to uint8 with round-half-away-from-zero."""
    return np.clip(round_half_away(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def load_png(path: str | os.PathLike, strip_alpha: bool = False) -> np.ndarray:
    """Read an 8-bit grayscale or RGB PNG into an ``(H, W, C)`` array in [0, 1].

    Alpha channels are rejected unless ``strip_alpha`` is set, in which case
    they are dropped. Palette, 1-bit and 16-bit files are rejected.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such image: {path}")
    with PILImage.open(path) as im:
        if im.format != "PNG":
            raise ImageError(f"{path}: not a PNG file (format {im.format})")
        mode = im.mode
        if mode in ("RGBA", "LA"):
            if not strip_alpha:
                raise ImageError(f"{path}: alpha channel present (mode {mode}); pass strip_alpha to drop it")
            im = im.convert("RGB" if mode == "RGBA" else "L")
            mode = im.mode
        if mode not in ("L", "RGB"):
            raise ImageError(f"{path}: unsupported PNG mode {mode!r}; only 8-bit grayscale or RGB")
        data = np.asarray(im, dtype=np.uint8)
    if data.ndim == 2:
        data = data[:, :, None]
    return data.astype(np.float64) / 255.0


def save_png(img: np.ndarray, path: str | os.PathLike) -> None:
    """Write an image in [0, 1] as an 8-bit PNG.

    The file is written to a temporary name in the target directory and
    renamed into place, so a failure never leaves a partial file behind.
    """
    img = check_image(img)
    data = to_bytes(img)
    pil = PILImage.fromarray(data[:, :, 0] if data.shape[2] == 1 else data, mode="L" if data.shape[2] == 1 else "RGB")
    path = Path(path)
    fd, tmp = tempfile.mkstemp(prefix=".tmp-", suffix=".png", dir=path.parent if str(path.parent) else ".")
    try:
        with os.fdopen(fd, "wb") as fh:
            pil.save(fh, format="PNG")
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def rgb_to_y(img: np.ndarray) -> np.ndarray:
    """BT.601 limited-range luma of an RGB image in [0, 1].

    Output lies in [16/255, 235/255] and keeps a trailing channel axis.
    """
    img = np.asarray(img, dtype=np.float64)
    if img.shape[-1] != 3:
        raise ImageError(f"rgb_to_y needs 3 channels, got {img.shape[-1]}")
    return ((img @ _Y_COEFFS + _Y_OFFSET) / 255.0)[..., None]


def crop_patch(img: np.ndarray, x0: int, y0: int, h: int, w: int) -> np.ndarray:
    """Copy the ``h x w`` window whose top-left pixel is row ``x0``, column ``y0``."""
    H, W = img.shape[:2]
    if h < 1 or w < 1 or x0 < 0 or y0 < 0 or x0 + h > H or y0 + w > W:
        raise ImageError(f"window rows {x0}:{x0 + h}, cols {y0}:{y0 + w} outside {H}x{W} image")
    return img[x0:x0 + h, y0:y0 + w].copy()


def flip(img: np.ndarray, axis: str) -> np.ndarray:
    """Reverse the column order (``"horizontal"``) or the row order (``"vertical"``)."""
    if axis == "horizontal":
        return img[:, ::-1].copy()
    if axis == "vertical":
        return img[::-1].copy()
    raise ValueError(f"axis must be 'horizontal' or 'vertical', got {axis!r}")


def list_pngs(directory: str | os.PathLike) -> list[Path]:
    return sorted(p for p in Path(directory).iterdir() if p.suffix.lower() == ".png")
