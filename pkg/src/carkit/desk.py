"""Small reproducible image sets for desk-scale experiments.

Synthetic images cover sharp edges, oriented gratings, rings and text-like
blocks; photographic crops come from the sample images bundled with
scikit-image. Everything is deterministic given the seed.
"""

from __future__ import annotations

import numpy as np

TRAIN_PHOTOS = ["astronaut", "coffee", "rocket", "immunohistochemistry", "retina", "hubble_deep_field",
                "brick", "gravel"]
HELDOUT_PHOTOS = ["chelsea", "camera", "coins", "grass"]
VAL_PHOTOS = ["colorwheel", "moon"]


def _photo(name: str) -> np.ndarray:
    from skimage import data

    img = np.asarray(getattr(data, name)(), dtype=np.float64) / 255.0
    if img.ndim == 2:
        img = np.repeat(img[:, :, None], 3, axis=2)
    return img[:, :, :3]


def photo_crops(names: list[str], per_image: int, size: int, rng: np.random.Generator) -> list[np.ndarray]:
    out = []
    for name in names:
        img = _photo(name)
        H, W = img.shape[:2]
        for _ in range(per_image):
            x0 = rng.integers(H - size + 1)
            y0 = rng.integers(W - size + 1)
            out.append(img[x0:x0 + size, y0:y0 + size].copy())
    return out


def _colour(rng) -> np.ndarray:
    return rng.uniform(0.05, 0.95, 3)


def synthetic_image(kind: str, size: int, rng: np.random.Generator) -> np.ndarray:
    r, c = np.mgrid[0:size, 0:size].astype(np.float64)
    a, b = _colour(rng), _colour(rng)
    if kind == "grating":
        theta = rng.uniform(0, np.pi)
        period = rng.uniform(5, 14)
        t = 0.5 + 0.5 * np.sign(np.sin(2 * np.pi * (r * np.cos(theta) + c * np.sin(theta)) / period))
    elif kind == "rings":
        cx, cy = rng.uniform(0, size, 2)
        t = 0.5 + 0.5 * np.cos(np.hypot(r - cx, c - cy) ** 2 / rng.uniform(60, 160))
    elif kind == "shapes":
        t = np.zeros((size, size))
        for _ in range(rng.integers(4, 9)):
            x0, y0 = rng.uniform(0, size, 2)
            if rng.random() < 0.5:
                hh, ww = rng.uniform(8, size / 2, 2)
                t[(abs(r - x0) < hh / 2) & (abs(c - y0) < ww / 2)] = rng.random()
            else:
                t[np.hypot(r - x0, c - y0) < rng.uniform(5, size / 4)] = rng.random()
    elif kind == "text":
        t = np.ones((size, size))
        row = 4
        while row < size - 8:
            h = int(rng.integers(4, 8))
            col = 4
            while col < size - 4:
                w = int(rng.integers(2, 6))
                if rng.random() < 0.6:
                    t[row:row + h, col:col + w] = 0
                col += w + int(rng.integers(1, 3))
            row += h + int(rng.integers(3, 6))
    else:
        raise ValueError(f"unknown synthetic kind {kind!r}")
    img = a + t[:, :, None] * (b - a)
    ramp = rng.uniform(-0.1, 0.1) * (r / size)[:, :, None]
    return np.clip(img + ramp, 0.0, 1.0)


KINDS = ("grating", "rings", "shapes", "text")


def synthetic_set(count: int, size: int, rng: np.random.Generator) -> list[np.ndarray]:
    return [synthetic_image(KINDS[i % len(KINDS)], size, rng) for i in range(count)]


def desk_sets(size: int = 128, seed: int = 2024) -> dict[str, list[np.ndarray]]:
    """32 training, 4 validation and 8 held-out test images, half synthetic and half photographic."""
    rng = np.random.default_rng(seed)
    return {
        "train": photo_crops(TRAIN_PHOTOS, 2, size, rng) + synthetic_set(16, size, rng),
        "val": photo_crops(VAL_PHOTOS, 1, size, rng) + synthetic_set(2, size, rng),
        "test": photo_crops(HELDOUT_PHOTOS, 1, size, rng) + synthetic_set(4, size, rng),
    }
