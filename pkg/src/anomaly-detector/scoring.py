"""
Anomaly maps.

Per-token cosine distances between encoder and decoder features of both
scales, averaged, upsampled to the image, smoothed, and reduced to an image
score. Maps are plain float64 arrays; nothing here is differentiated.
"""

import io
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image
from scipy import ndimage

from dataio.blobs import encode_blob
from datamodels import ContractError, ModalityMask, NonFiniteError, ScoreConfig, ShapeError
from encoder import FeatureBundle
from storage import PathLike, atomic_write_bytes
from tensorgrad import Tensor, no_grad, ops

logger = logging.getLogger(__name__)


@dataclass
class AnomalyMap:
    values: np.ndarray  # [H, W], >= 0
    image_score: float


# ============================================================================
# Map construction
# ============================================================================


def token_map(en: FeatureBundle, de0: Tensor, de1: Tensor) -> np.ndarray:
    """Mean of the two per-token cosine distance grids: [B, grid_h, grid_w]."""
    if de0.shape != en.en0.shape or de1.shape != en.en1.shape:
        raise ShapeError(f"decoder outputs {de0.shape}/{de1.shape} do not match encoder {en.en0.shape}")
    with no_grad():
        d0 = ops.cosine_distance_rows(en.en0, de0).data.astype(np.float64)
        d1 = ops.cosine_distance_rows(en.en1, de1).data.astype(np.float64)
    grid = 0.5 * (d0 + d1)
    return grid.reshape(grid.shape[0], en.grid_h, en.grid_w)


def _interp_matrix(size_in: int, size_out: int) -> np.ndarray:
    """Row o holds the align_corners=False bilinear weights of output o."""
    src = (np.arange(size_out) + 0.5) * size_in / size_out - 0.5
    src = np.clip(src, 0.0, size_in - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, size_in - 1)
    frac = src - lo
    weights = np.zeros((size_out, size_in))
    rows = np.arange(size_out)
    np.add.at(weights, (rows, lo), 1.0 - frac)
    np.add.at(weights, (rows, hi), frac)
    return weights


def upsample_bilinear(m: np.ndarray, height: int, width: int) -> np.ndarray:
    """Bilinear resize of [..., h, w] to [..., height, width] (align_corners=False)."""
    m = np.asarray(m, dtype=np.float64)
    h, w = m.shape[-2:]
    if height < h or width < w:
        raise ContractError(f"upsample target {height}x{width} is smaller than {h}x{w}")
    return _interp_matrix(h, height) @ m @ _interp_matrix(w, width).T


def gaussian_kernel(sigma: float) -> np.ndarray:
    radius = int(math.ceil(3.0 * sigma))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    kernel = np.exp(-0.5 * (x / sigma) ** 2)
    return kernel / kernel.sum()


def gaussian_smooth(m: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian over the last two axes, radius ceil(3 sigma), reflect padding."""
    if sigma < 0:
        raise ContractError(f"sigma must be >= 0, got {sigma}")
    m = np.asarray(m)
    if sigma == 0:
        return m.copy()
    kernel = gaussian_kernel(sigma)
    out = ndimage.correlate1d(m.astype(np.float64), kernel, axis=-1, mode="reflect")
    return ndimage.correlate1d(out, kernel, axis=-2, mode="reflect")


def image_score(m: np.ndarray, mode: str = "top1pct") -> float:
    m = np.asarray(m, dtype=np.float64)
    if not np.all(np.isfinite(m)):
        raise NonFiniteError("anomaly map", f"shape {m.shape}")
    if mode == "max":
        return float(m.max())
    if mode == "top1pct":
        k = -(-m.size // 100)
        return float(np.sort(m.reshape(-1))[-k:].mean())
    raise ContractError(f"unknown image score mode '{mode}'")


# ============================================================================
# Batch scoring
# ============================================================================


def score_batch(model, images: np.ndarray, mask: ModalityMask, cfg: ScoreConfig) -> list[AnomalyMap]:
    """Masked forward, token map, upsample to input size, smooth, reduce."""
    size = images.shape[-1]
    with no_grad():
        out = model.forward(Tensor.wrap(images), mask)
    grids = token_map(out.bundle, out.de0, out.de1)
    smoothed = gaussian_smooth(upsample_bilinear(grids, images.shape[-2], size), cfg.sigma)
    smoothed = np.maximum(smoothed, 0.0)
    return [AnomalyMap(values=v, image_score=image_score(v, cfg.image_score)) for v in smoothed]


def score_images(model, images: np.ndarray, mask: ModalityMask, cfg: ScoreConfig) -> list[AnomalyMap]:
    maps: list[AnomalyMap] = []
    for start in range(0, len(images), cfg.batch_size):
        maps.extend(score_batch(model, images[start : start + cfg.batch_size], mask, cfg))
    return maps


# ============================================================================
# Export
# ============================================================================


def normalization_bounds(maps: list[AnomalyMap]) -> tuple[float, float]:
    """Min and max over every map of an evaluation set."""
    if not maps:
        return 0.0, 0.0
    return float(min(m.values.min() for m in maps)), float(max(m.values.max() for m in maps))


def heatmap_png(values: np.ndarray, bounds: tuple[float, float]) -> bytes:
    """8-bit grayscale PNG after min-max normalization with the given bounds."""
    lo, hi = bounds
    scale = (values - lo) / (hi - lo) if hi > lo else np.zeros_like(values)
    pixels = np.clip(np.round(scale * 255.0), 0, 255).astype(np.uint8)
    buffer = io.BytesIO()
    Image.fromarray(pixels).save(buffer, format="PNG")
    return buffer.getvalue()


def write_heatmap(path: PathLike, values: np.ndarray, bounds: tuple[float, float]) -> Path:
    return atomic_write_bytes(path, heatmap_png(values, bounds))


def write_map_blob(path: PathLike, values: np.ndarray, mask: Optional[np.ndarray] = None) -> Path:
    """Raw map as a single-channel sample blob."""
    return atomic_write_bytes(path, encode_blob(values[None].astype(np.float32), mask))
