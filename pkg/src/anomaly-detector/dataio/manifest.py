import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import yaml
from pydantic import ValidationError

from datamodels import MODALITY_NAMES, ConfigurationError, ContractError, Manifest, SampleRecord, ShapeError
from storage import PathLike, read_yaml, staged_directory, write_yaml

from .blobs import SliceSample, blob_read, blob_write

logger = logging.getLogger(__name__)

MANIFEST_FILE = "manifest.yaml"
TRAIN_FRACTION = 0.8


@dataclass
class DatasetSplit:
    train: list[SliceSample] = field(default_factory=list)
    test_normal: list[SliceSample] = field(default_factory=list)
    test_abnormal: list[SliceSample] = field(default_factory=list)


@dataclass
class LoadedSplit:
    """Arrays of one manifest split, in manifest order"""

    ids: list[str]
    images: np.ndarray  # [N, C, H, W] f32
    masks: np.ndarray  # [N, H, W] u8, zeros where no mask was stored
    labels: np.ndarray  # [N] 0 normal / 1 abnormal


# ============================================================================
# Split protocol
# ============================================================================


def split_dataset(samples: Sequence[SliceSample], seed: int) -> DatasetSplit:
    """
    80% of the (shuffled) normals train, the rest are test normals; abnormals
    are shuffled and truncated to the test-normal count.
    """
    ordered = sorted(samples, key=lambda s: s.id)
    normals = [s for s in ordered if s.label == "normal"]
    abnormals = [s for s in ordered if s.label == "abnormal"]
    if not normals:
        raise ContractError("split_dataset needs at least one normal sample")

    rng = np.random.default_rng(seed)
    normals = [normals[i] for i in rng.permutation(len(normals))]
    abnormals = [abnormals[i] for i in rng.permutation(len(abnormals))]

    n_train = int(round(TRAIN_FRACTION * len(normals)))
    test_normal = normals[n_train:]
    split = DatasetSplit(
        train=normals[:n_train],
        test_normal=test_normal,
        test_abnormal=abnormals[: len(test_normal)],
    )
    logger.info(
        f"split {len(samples)} samples: {len(split.train)} train, "
        f"{len(split.test_normal)} + {len(split.test_abnormal)} test"
    )
    return split


# ============================================================================
# Manifest persistence
# ============================================================================


def write_dataset(split: DatasetSplit, out_dir: PathLike, modalities: Sequence[str] = MODALITY_NAMES) -> Manifest:
    """
    Write one blob per sample under out_dir/blobs and the manifest next to them.

    Blobs are staged and swapped in as a whole; the manifest goes last, so a
    failed write leaves neither a partial blobs/ nor a new manifest.
    """
    out_dir = Path(out_dir)
    records = []
    with staged_directory(out_dir / "blobs") as staging:
        for name, samples in (("train", split.train), ("test", split.test_normal + split.test_abnormal)):
            for sample in samples:
                blob = Path("blobs") / f"{sample.id}.adsl"
                blob_write(staging / blob.name, sample)
                records.append(
                    SampleRecord(
                        id=sample.id,
                        blob=blob.as_posix(),
                        mask=blob.as_posix() if sample.mask is not None else None,
                        label=sample.label,
                        split=name,
                        volume=sample.volume,
                        slice_index=sample.slice_index,
                    )
                )
    manifest = Manifest(modalities=list(modalities), samples=records)
    save_manifest(out_dir / MANIFEST_FILE, manifest)
    return manifest


def save_manifest(path: PathLike, manifest: Manifest) -> Path:
    data = manifest.model_dump(mode="json")
    data["counts"] = manifest.counts
    return write_yaml(path, data)


def load_manifest(path: PathLike) -> tuple[Manifest, Path]:
    """Manifest plus the directory its blob paths are relative to; a directory argument means <dir>/manifest.yaml."""
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_FILE
    if not path.exists():
        raise ConfigurationError(f"manifest not found: {path}")
    try:
        data = read_yaml(path) or {}
        data.pop("counts", None)
        manifest = Manifest(**data)
    except (yaml.YAMLError, ValidationError, TypeError, AttributeError) as e:
        raise ConfigurationError(f"invalid manifest {path}: {e}") from e
    missing = [s.blob for s in manifest.samples if not (path.parent / s.blob).exists()]
    if missing:
        raise ConfigurationError(f"manifest {path} references missing blobs, e.g. {missing[0]}")
    return manifest, path.parent


def load_split(manifest: Manifest, root: Path, split: str, channels: Optional[int] = None) -> LoadedSplit:
    records = manifest.split(split)
    if not records:
        return LoadedSplit(
            ids=[],
            images=np.zeros((0, channels or 0, 0, 0), np.float32),
            masks=np.zeros((0, 0, 0), np.uint8),
            labels=np.zeros(0, np.int64),
        )

    images, masks = [], []
    for record in records:
        sample = blob_read(root / record.blob, record.id)
        if channels is not None and sample.channels.shape[0] != channels:
            raise ShapeError(f"sample {record.id} has {sample.channels.shape[0]} channels, expected {channels}")
        images.append(sample.channels)
        h, w = sample.channels.shape[1:]
        masks.append(sample.mask if sample.mask is not None else np.zeros((h, w), np.uint8))

    shapes = {img.shape for img in images}
    if len(shapes) != 1:
        raise ShapeError(f"split '{split}' mixes sample shapes {sorted(shapes)}")
    return LoadedSplit(
        ids=[r.id for r in records],
        images=np.stack(images),
        masks=np.stack(masks),
        labels=np.array([1 if r.label == "abnormal" else 0 for r in records], dtype=np.int64),
    )
