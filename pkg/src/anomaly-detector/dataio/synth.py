"""
Deterministic synthetic three-modality dataset.

Each sample is an elliptical "brain" with a smooth radial profile and a
low-frequency texture. Modality 0 is the base image, modality 1 its inverted
contrast inside the brain, modality 2 the square root of the base. Abnormal
samples carry 1-3 elliptical lesions with per-modality intensity offsets and
an exact ground-truth mask.
"""

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from datamodels import ContractError, Manifest
from storage import PathLike

from .blobs import SliceSample
from .manifest import DatasetSplit, write_dataset

logger = logging.getLogger(__name__)

IMAGE_SIZE = 64
NOISE_SIGMA = 0.02
LESION_OFFSETS = (0.35, -0.35, 0.25)
LESION_RADIUS = (3.0, 8.0)


@dataclass
class SynthRender:
    channels: np.ndarray  # [3, H, W] f32
    mask: np.ndarray  # [H, W] u8
    brain: np.ndarray  # [H, W] bool


def _rotated_ellipse(xx, yy, cx, cy, a, b, theta) -> np.ndarray:
    """Normalized squared radius of every pixel w.r.t. a rotated ellipse."""
    dx, dy = xx - cx, yy - cy
    u = dx * np.cos(theta) + dy * np.sin(theta)
    v = -dx * np.sin(theta) + dy * np.cos(theta)
    return (u / a) ** 2 + (v / b) ** 2


def _texture(rng: np.random.Generator, xx, yy, size: int) -> np.ndarray:
    texture = np.zeros_like(xx)
    for _ in range(3):
        fx, fy = rng.uniform(0.5, 2.0, size=2) * 2.0 * np.pi / size
        phase = rng.uniform(0.0, 2.0 * np.pi)
        texture += np.sin(fx * xx + fy * yy + phase)
    return texture / 3.0


def render_sample(rng: np.random.Generator, lesions: int = 0, size: int = IMAGE_SIZE) -> SynthRender:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    centre = size / 2.0
    r2 = _rotated_ellipse(
        xx,
        yy,
        centre + rng.uniform(-2, 2),
        centre + rng.uniform(-2, 2),
        rng.uniform(0.34, 0.42) * size,
        rng.uniform(0.28, 0.37) * size,
        rng.uniform(0.0, np.pi),
    )
    brain = r2 <= 1.0
    base = np.where(brain, 0.45 + 0.1 * (1.0 - r2) + 0.05 * _texture(rng, xx, yy, size), 0.0)

    mask = np.zeros((size, size), dtype=bool)
    if lesions:
        inside = np.flatnonzero(brain)
        for _ in range(lesions):
            cy, cx = np.unravel_index(rng.choice(inside), brain.shape)
            ra, rb = rng.uniform(*LESION_RADIUS, size=2) * (size / IMAGE_SIZE)
            mask |= _rotated_ellipse(xx, yy, cx, cy, ra, rb, rng.uniform(0.0, np.pi)) <= 1.0
        mask &= brain

    channels = np.stack(
        [
            base,
            np.where(brain, 1.0 - base, 0.0),
            np.sqrt(base),
        ]
    )
    for c, offset in enumerate(LESION_OFFSETS):
        channels[c] += offset * mask
    channels += rng.normal(0.0, NOISE_SIGMA, size=channels.shape)
    return SynthRender(channels=channels.astype(np.float32), mask=mask.astype(np.uint8), brain=brain)


def synth_generate(
    n_normal: int,
    n_abnormal: int,
    seed: int,
    out_dir: PathLike,
    n_test_normal: int | None = None,
    size: int = IMAGE_SIZE,
) -> Manifest:
    """
    n_normal training normals plus a test set of n_test_normal normals
    (default: n_abnormal) and n_abnormal abnormals. Every sample draws from
    its own generator seeded by (seed, role, index). Images are size x size.
    """
    n_test_normal = n_abnormal if n_test_normal is None else n_test_normal
    if n_normal < 1 or n_abnormal < 1 or n_test_normal < 0:
        raise ContractError("synth_generate needs n_normal >= 1 and n_abnormal >= 1")

    def sample(role: int, index: int, prefix: str) -> SliceSample:
        rng = np.random.default_rng([seed, role, index])
        lesions = int(rng.integers(1, 4)) if role == 2 else 0
        render = render_sample(rng, lesions, size=size)
        return SliceSample(
            id=f"{prefix}_{index:04d}",
            channels=render.channels,
            mask=render.mask if lesions else None,
            volume="synth",
        )

    split = DatasetSplit(
        train=[sample(0, i, "train") for i in range(n_normal)],
        test_normal=[sample(1, i, "test_normal") for i in range(n_test_normal)],
        test_abnormal=[sample(2, i, "test_abnormal") for i in range(n_abnormal)],
    )
    manifest = write_dataset(split, Path(out_dir))
    logger.info(f"synthetic dataset written to {out_dir}: {manifest.counts}")
    return manifest
