"""
Sample blobs.

    "ADSL"  u32 C, u32 H, u32 W, C*H*W little-endian f32
    "ADMK"  H*W u8 mask          (optional section)
"""

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from datamodels import BlobFormatError, NonFiniteError, ShapeError
from storage import PathLike, atomic_write_bytes

SAMPLE_MAGIC = b"ADSL"
MASK_MAGIC = b"ADMK"
HEADER = struct.Struct("<4sIII")


@dataclass
class SliceSample:
    """One 2-D multi-channel slice with optional ground truth"""

    id: str
    channels: np.ndarray  # [C, H, W] f32
    mask: Optional[np.ndarray] = None  # [H, W] u8
    volume: Optional[str] = None
    slice_index: Optional[int] = None

    @property
    def label(self) -> str:
        return "abnormal" if self.mask is not None and bool(np.any(self.mask)) else "normal"


def encode_blob(channels: np.ndarray, mask: Optional[np.ndarray] = None) -> bytes:
    channels = np.asarray(channels)
    if channels.ndim != 3:
        raise ShapeError(f"blob channels must be [C, H, W], got {channels.shape}")
    if not np.all(np.isfinite(channels)):
        raise NonFiniteError("blob channels", f"shape {channels.shape}")
    c, h, w = channels.shape
    parts = [HEADER.pack(SAMPLE_MAGIC, c, h, w), np.ascontiguousarray(channels, dtype="<f4").tobytes()]
    if mask is not None:
        mask = np.asarray(mask)
        if mask.shape != (h, w):
            raise ShapeError(f"mask {mask.shape} does not match slice {h}x{w}")
        parts += [MASK_MAGIC, (mask != 0).astype(np.uint8).tobytes()]
    return b"".join(parts)


def decode_blob(buffer: bytes) -> tuple[np.ndarray, Optional[np.ndarray]]:
    if len(buffer) < HEADER.size:
        raise BlobFormatError("truncated blob header", len(buffer))
    magic, c, h, w = HEADER.unpack_from(buffer, 0)
    if magic != SAMPLE_MAGIC:
        raise BlobFormatError(f"bad sample magic {magic!r}", 0)

    offset = HEADER.size
    payload = c * h * w * 4
    if len(buffer) < offset + payload:
        raise BlobFormatError(f"truncated payload: header promises {payload} bytes", len(buffer))
    channels = np.frombuffer(buffer, dtype="<f4", count=c * h * w, offset=offset).reshape(c, h, w).astype(np.float32)
    offset += payload

    if offset == len(buffer):
        return channels, None
    if buffer[offset : offset + 4] != MASK_MAGIC:
        raise BlobFormatError("bad mask section magic", offset)
    offset += 4
    if len(buffer) != offset + h * w:
        raise BlobFormatError(f"mask section must hold {h * w} bytes", len(buffer))
    mask = np.frombuffer(buffer, dtype=np.uint8, offset=offset).reshape(h, w).copy()
    return channels, mask


def blob_write(path: PathLike, sample: SliceSample) -> Path:
    return atomic_write_bytes(path, encode_blob(sample.channels, sample.mask))


def blob_read(path: PathLike, sample_id: Optional[str] = None) -> SliceSample:
    path = Path(path)
    channels, mask = decode_blob(path.read_bytes())
    return SliceSample(id=sample_id or path.stem, channels=channels, mask=mask)
