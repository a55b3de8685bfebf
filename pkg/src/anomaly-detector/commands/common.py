"""
Setup shared by the command handlers: config with CLI overrides, the
seeded generators of a run, and the full-modality preparation pass.
"""

import logging
from pathlib import Path
from typing import Optional

import numpy as np

from align import ReferenceStore, precompute_reference
from datamodels import ALIGN_POINTS, AnyADConfig, ConfigurationError
from dataio import LoadedSplit, load_manifest, load_split
from encoder import pretrain_teacher
from pipeline import AnyADModel
from storage import load_config

logger = logging.getLogger(__name__)

# stream ids under the run seed
LOOP_STREAM = 1
PRETRAIN_STREAM = 2


def config_from_args(args) -> AnyADConfig:
    cfg = load_config(getattr(args, "config", None))
    seed = getattr(args, "seed", None)
    if seed is not None:
        cfg = cfg.model_copy(update={"train": cfg.train.model_copy(update={"seed": seed})})
    return cfg


def loop_rng(cfg: AnyADConfig) -> np.random.Generator:
    return np.random.default_rng([cfg.train.seed, LOOP_STREAM])


def load_train_images(data: Optional[str], cfg: AnyADConfig) -> LoadedSplit:
    if not data:
        raise ConfigurationError("--data <manifest> is required")
    manifest, root = load_manifest(data)
    train = load_split(manifest, root, "train", channels=cfg.encoder.in_channels)
    if len(train.ids) == 0:
        raise ConfigurationError(f"manifest {data} has no training samples")
    check_image_size(train, cfg)
    return train


def check_image_size(split: LoadedSplit, cfg: AnyADConfig) -> None:
    size = cfg.encoder.image_size
    if len(split.ids) and split.images.shape[-2:] != (size, size):
        h, w = split.images.shape[-2:]
        raise ConfigurationError(f"samples are {h}x{w}, the encoder expects {size}x{size}")


def prepare_run(cfg: AnyADConfig, images: np.ndarray) -> tuple[AnyADModel, ReferenceStore]:
    """Initialize, optionally pretrain the teacher, then cache full-modality reference statistics."""
    model = AnyADModel.initialize(cfg)
    pretrain_teacher(
        model.params,
        cfg.encoder,
        cfg.teacher,
        images,
        np.random.default_rng([cfg.train.seed, PRETRAIN_STREAM]),
        batch_size=cfg.train.batch_size,
    )
    refs = precompute_reference(
        images,
        model,
        points=ALIGN_POINTS,
        batch_size=cfg.train.batch_size,
        attachment=cfg.train.align_points,
    )
    return model, refs


def output_dir(args, fallback: Path) -> Path:
    out = getattr(args, "out", None)
    return Path(out) if out else fallback
