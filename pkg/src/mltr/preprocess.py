"""Image preprocessing chain: grayscale, normalize, CLAHE, gamma.

Stage order is fixed: (resize) -> grayscale -> per-image min-max
normalization to [0, 255] -> contrast-limited adaptive histogram
equalization -> gamma correction -> [0, 1] float. Every stage maps a
constant image to a constant image.

CLAHE here is the classic per-tile recipe: clip each tile's 256-bin
histogram at max(1, clip * tile_area / 256), spread the clipped excess
uniformly (excess // 256 to every bin, one extra count to each of the
first excess % 256 bins), build the CDF lookup table
lut[v] = floor(cdf[v] * 255 / tile_area + 0.5), and blend the four
surrounding tile LUTs bilinearly at every pixel.
"""
from __future__ import annotations

import numpy as np

from mltr import kernels
from mltr.dataio import ImageBuffer, resize_bilinear
from mltr.errors import ConfigError, ShapeError

LUMA_WEIGHTS = (0.299, 0.587, 0.114)


def grayscale(img: ImageBuffer) -> ImageBuffer:
    """BT.601 luma for color input; grayscale passes through."""
    if img.channels == 1:
        return img
    arr = img.pixels.astype(np.float64)
    luma = LUMA_WEIGHTS[0] * arr[:, :, 0] + LUMA_WEIGHTS[1] * arr[:, :, 1] \
        + LUMA_WEIGHTS[2] * arr[:, :, 2]
    out = np.clip(np.floor(luma + 0.5), 0, 255).astype(np.uint8)
    return ImageBuffer(img.width, img.height, 1, out)


def minmax_normalize(img: ImageBuffer) -> ImageBuffer:
    """Stretch intensities to the full [0, 255] range; constants pass through."""
    arr = img.pixels
    lo = int(arr.min())
    hi = int(arr.max())
    if lo == hi:
        return img
    scaled = (arr.astype(np.float64) - lo) * (255.0 / (hi - lo))
    out = np.clip(np.floor(scaled + 0.5), 0, 255).astype(np.uint8)
    return ImageBuffer(img.width, img.height, 1, out)


def clahe_luts(img: np.ndarray, clip: float, tiles: tuple[int, int]) -> np.ndarray:
    """Per-tile clipped-CDF lookup tables, (tiles_y, tiles_x, 256) float64."""
    h, w = img.shape
    ty, tx = tiles
    if h % ty or w % tx:
        raise ConfigError(f"tile grid {tiles} does not divide image {h}x{w}")
    th, tw = h // ty, w // tx
    area = th * tw
    limit = max(1, int(clip * area / 256.0))
    luts = np.empty((ty, tx, 256), dtype=np.float64)
    scale = 255.0 / area
    for i in range(ty):
        for j in range(tx):
            tile = img[i * th:(i + 1) * th, j * tw:(j + 1) * tw]
            hist = np.bincount(tile.reshape(-1), minlength=256).astype(np.int64)
            excess = int(np.maximum(hist - limit, 0).sum())
            hist = np.minimum(hist, limit)
            hist += excess // 256
            rem = excess % 256
            if rem:
                hist[:rem] += 1
            cdf = np.cumsum(hist)
            luts[i, j] = np.floor(cdf * scale + 0.5)
    return luts


def clahe(img: ImageBuffer, clip: float = 2.0,
          tiles: tuple[int, int] = (8, 8)) -> ImageBuffer:
    """Contrast-limited adaptive histogram equalization on a gray image."""
    if img.channels != 1:
        raise ShapeError("clahe expects a grayscale image")
    luts = clahe_luts(img.pixels, clip, tiles)
    th = img.height // tiles[0]
    tw = img.width // tiles[1]
    out = kernels.clahe_apply(img.pixels, luts, th, tw)
    return ImageBuffer(img.width, img.height, 1, out)


def gamma_lut(gamma: float) -> np.ndarray:
    """Per-value mapping v -> floor(255 * (v/255)^gamma + 0.5)."""
    v = np.arange(256, dtype=np.float64)
    out = np.floor(255.0 * (v / 255.0) ** gamma + 0.5)
    return np.clip(out, 0, 255).astype(np.uint8)


def gamma_correct(img: ImageBuffer, gamma: float = 1.2) -> ImageBuffer:
    out = gamma_lut(gamma)[img.pixels]
    return ImageBuffer(img.width, img.height, img.channels, out)


def preprocess(img: ImageBuffer, out_hw: tuple[int, int] | None = None,
               gamma: float = 1.2, clahe_clip: float = 2.0,
               clahe_tiles: tuple[int, int] = (8, 8)) -> ImageBuffer:
    """Full chain; output is grayscale at out_hw (or the input size)."""
    if out_hw is not None and (img.height, img.width) != tuple(out_hw):
        img = resize_bilinear(img, out_hw[0], out_hw[1])
    img = grayscale(img)
    img = minmax_normalize(img)
    img = clahe(img, clip=clahe_clip, tiles=clahe_tiles)
    return gamma_correct(img, gamma=gamma)


def to_unit_float(img: ImageBuffer, dtype=np.float32) -> np.ndarray:
    """(1, H, W) array in [0, 1] for the model."""
    if img.channels != 1:
        raise ShapeError("model input must be grayscale")
    return (img.pixels.astype(dtype) / dtype(255.0))[None, :, :]
