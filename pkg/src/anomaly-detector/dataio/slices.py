import logging
from typing import Optional, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, model_validator

from datamodels import ContractError, ShapeError

from .blobs import SliceSample

logger = logging.getLogger(__name__)


class SliceProtocol(BaseModel):
    """Which slices of a volume become samples (inclusive range)"""

    model_config = ConfigDict(extra="forbid")

    axis: int = 2
    start: int = 80
    stop: int = 120
    stride: int = 5

    @model_validator(mode="after")
    def _check(self) -> "SliceProtocol":
        if self.stride < 1 or self.start < 0 or self.stop < self.start:
            raise ValueError("slice protocol needs 0 <= start <= stop and stride >= 1")
        return self

    def indices(self, depth: int) -> list[int]:
        return [i for i in range(self.start, self.stop + 1, self.stride) if i < depth]


def normalize_channel(channel: np.ndarray) -> np.ndarray:
    """Min-max to [0, 1]; a constant channel maps to zeros."""
    lo, hi = float(channel.min()), float(channel.max())
    if hi <= lo:
        return np.zeros_like(channel, dtype=np.float32)
    return ((channel - lo) / (hi - lo)).astype(np.float32)


def extract_slices(
    volumes: Sequence[np.ndarray],
    mask_volume: Optional[np.ndarray],
    protocol: SliceProtocol = SliceProtocol(),
    volume_id: str = "volume",
) -> list[SliceSample]:
    """
    Cut the protocol's slices out of co-registered modality volumes.

    Channels are stacked in the given order (FLAIR, T1, T2) and each is
    min-max normalized per slice; a slice is abnormal iff its mask has a
    positive pixel.
    """
    if not volumes:
        raise ContractError("extract_slices needs at least one modality volume")
    shape = np.shape(volumes[0])
    mismatched = [np.shape(v) for v in volumes if np.shape(v) != shape]
    if mismatched or (mask_volume is not None and np.shape(mask_volume) != shape):
        raise ShapeError(f"modality volumes disagree on dims: {shape} vs {mismatched or np.shape(mask_volume)}")
    if not 0 <= protocol.axis < len(shape):
        raise ShapeError(f"slice axis {protocol.axis} out of range for dims {shape}")

    samples = []
    for index in protocol.indices(shape[protocol.axis]):
        channels = np.stack([normalize_channel(np.take(v, index, axis=protocol.axis)) for v in volumes])
        mask = None
        if mask_volume is not None:
            mask = (np.take(mask_volume, index, axis=protocol.axis) > 0).astype(np.uint8)
        samples.append(
            SliceSample(
                id=f"{volume_id}_s{index:03d}",
                channels=channels,
                mask=mask,
                volume=volume_id,
                slice_index=index,
            )
        )
    logger.debug(f"{volume_id}: {len(samples)} slices, {sum(s.label == 'abnormal' for s in samples)} abnormal")
    return samples
