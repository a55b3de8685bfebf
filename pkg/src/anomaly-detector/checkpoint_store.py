"""
Checkpoint archive.

Little-endian layout:

    magic      8 bytes   b"ANYAD1\\0\\0"
    count      u32
    entries    count x (u16 name length, UTF-8 name, u8 dtype code,
                        u8 rank, rank x u64 dims, raw data)
    snapshot   u32 length + UTF-8 YAML (config, step, rng state, attachment)

Entries are written in sorted name order so that load -> save reproduces
the same bytes.
"""

import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import numpy as np
import yaml
from pydantic import ValidationError

from align import ChannelStats, ReferenceStore
from datamodels import AnyADConfig, CheckpointFormatError
from pipeline import AnyADModel
from storage import PathLike, atomic_write_bytes, dump_yaml
from tensorgrad import AdamState

logger = logging.getLogger(__name__)

MAGIC = b"ANYAD1\x00\x00"

DTYPE_CODES = {1: np.dtype("<f4"), 2: np.dtype("<f8"), 3: np.dtype("<i8")}
CODE_FOR_KIND = {np.dtype("float32"): 1, np.dtype("float64"): 2, np.dtype("int64"): 3}


@dataclass
class Checkpoint:
    """Decoded archive; nothing is exposed until the whole buffer parsed"""

    tensors: dict[str, np.ndarray]
    config: AnyADConfig
    step: int
    rng_state: dict[str, Any]
    attachment: list[str] = field(default_factory=list)


# ============================================================================
# Encoding
# ============================================================================


def _encode_entry(name: str, array: np.ndarray) -> bytes:
    array = np.asarray(array)
    code = CODE_FOR_KIND.get(array.dtype)
    if code is None:
        raise CheckpointFormatError(f"tensor '{name}' has unsupported dtype {array.dtype}", 0)
    raw_name = name.encode("utf-8")
    header = struct.pack("<H", len(raw_name)) + raw_name + struct.pack("<BB", code, array.ndim)
    header += struct.pack(f"<{array.ndim}Q", *array.shape)
    return header + np.ascontiguousarray(array, dtype=DTYPE_CODES[code]).tobytes()


def encode_checkpoint(
    model: AnyADModel,
    refs: Optional[ReferenceStore],
    cfg: AnyADConfig,
    step: int,
    rng: np.random.Generator,
    opt_state: Optional[AdamState] = None,
) -> bytes:
    tensors: dict[str, np.ndarray] = {name: t.data for name, t in model.params.items()}

    if opt_state is not None:
        tensors["adam.step"] = np.array(opt_state.step, dtype=np.int64)
        for name in opt_state.m:
            tensors[f"adam.m.{name}"] = opt_state.m[name]
            tensors[f"adam.v.{name}"] = opt_state.v[name]

    attachment: list[str] = []
    if refs is not None:
        attachment = list(refs.attachment)
        for point, stats in refs.points.items():
            tensors[f"ref.{point}.mean"] = stats.mean.data.astype(np.float64)
            tensors[f"ref.{point}.var"] = stats.var.data.astype(np.float64)
            tensors[f"ref.{point}.count"] = np.array(stats.count, dtype=np.int64)

    body = [MAGIC, struct.pack("<I", len(tensors))]
    body += [_encode_entry(name, tensors[name]) for name in sorted(tensors)]

    snapshot = dump_yaml(
        {
            "attachment": attachment,
            "config": cfg.model_dump(mode="json"),
            "rng_state": rng.bit_generator.state,
            "step": int(step),
        }
    ).encode("utf-8")
    body.append(struct.pack("<I", len(snapshot)) + snapshot)
    return b"".join(body)


def save_checkpoint(
    path: PathLike,
    model: AnyADModel,
    refs: Optional[ReferenceStore],
    cfg: AnyADConfig,
    step: int,
    rng: np.random.Generator,
    opt_state: Optional[AdamState] = None,
) -> Path:
    path = atomic_write_bytes(path, encode_checkpoint(model, refs, cfg, step, rng, opt_state))
    logger.info(f"checkpoint written: {path} (step {step})")
    return path


# ============================================================================
# Decoding
# ============================================================================


class _Reader:
    def __init__(self, buffer: bytes):
        self.buffer = buffer
        self.offset = 0

    def take(self, size: int, what: str) -> bytes:
        end = self.offset + size
        if end > len(self.buffer):
            raise CheckpointFormatError(f"truncated archive while reading {what}", self.offset)
        chunk = self.buffer[self.offset : end]
        self.offset = end
        return chunk

    def unpack(self, fmt: str, what: str) -> tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def decode_checkpoint(buffer: bytes) -> Checkpoint:
    reader = _Reader(buffer)
    if reader.take(len(MAGIC), "magic") != MAGIC:
        raise CheckpointFormatError("bad checkpoint magic", 0)

    (count,) = reader.unpack("<I", "entry count")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        entry_offset = reader.offset
        (name_len,) = reader.unpack("<H", "name length")
        try:
            name = reader.take(name_len, "name").decode("utf-8")
        except UnicodeDecodeError:
            raise CheckpointFormatError("entry name is not UTF-8", entry_offset) from None
        code, rank = reader.unpack("<BB", f"header of '{name}'")
        if code not in DTYPE_CODES:
            raise CheckpointFormatError(f"unknown dtype code {code} for '{name}'", reader.offset - 2)
        dims_offset = reader.offset
        dims = reader.unpack(f"<{rank}Q", f"dims of '{name}'")
        dtype = DTYPE_CODES[code]
        # python ints: a corrupt dim must not overflow before the size check
        n_bytes = math.prod(dims) * dtype.itemsize
        remaining = len(buffer) - reader.offset
        if n_bytes > remaining or any(d > len(buffer) for d in dims):
            raise CheckpointFormatError(
                f"dims {list(dims)} of '{name}' need {n_bytes} bytes, {remaining} remain", dims_offset
            )
        raw = reader.take(n_bytes, f"data of '{name}'")
        if name in tensors:
            raise CheckpointFormatError(f"duplicate entry '{name}'", entry_offset)
        tensors[name] = np.frombuffer(raw, dtype=dtype).reshape(dims).astype(dtype.newbyteorder("="))

    snapshot_offset = reader.offset
    (length,) = reader.unpack("<I", "snapshot length")
    try:
        snapshot = yaml.safe_load(reader.take(length, "snapshot").decode("utf-8"))
    except (UnicodeDecodeError, yaml.YAMLError) as e:
        raise CheckpointFormatError(f"unreadable config snapshot: {e}", snapshot_offset) from e
    if reader.offset != len(buffer):
        raise CheckpointFormatError("trailing bytes after snapshot", reader.offset)
    if not isinstance(snapshot, dict) or not {"config", "step", "rng_state"} <= set(snapshot):
        raise CheckpointFormatError("snapshot lacks config/step/rng_state", snapshot_offset)

    try:
        config = AnyADConfig(**snapshot["config"])
    except ValidationError as e:
        raise CheckpointFormatError(f"invalid config snapshot: {e}", snapshot_offset) from e

    return Checkpoint(
        tensors=tensors,
        config=config,
        step=int(snapshot["step"]),
        rng_state=snapshot["rng_state"],
        attachment=list(snapshot.get("attachment") or []),
    )


def load_checkpoint(path: PathLike) -> Checkpoint:
    path = Path(path)
    checkpoint = decode_checkpoint(path.read_bytes())
    logger.debug(f"checkpoint {path}: {len(checkpoint.tensors)} tensors, step {checkpoint.step}")
    return checkpoint


# ============================================================================
# Restoring live objects
# ============================================================================


def restore_model(checkpoint: Checkpoint) -> AnyADModel:
    model = AnyADModel.initialize(checkpoint.config)
    for name, tensor in model.params.items():
        stored = checkpoint.tensors.get(name)
        if stored is None:
            raise CheckpointFormatError(f"missing parameter '{name}'", 0)
        if stored.shape != tensor.shape:
            raise CheckpointFormatError(f"parameter '{name}' has shape {stored.shape}, expected {tensor.shape}", 0)
        tensor.data = stored.copy()
    return model


def restore_references(checkpoint: Checkpoint) -> ReferenceStore:
    points = {}
    for name in checkpoint.tensors:
        if name.startswith("ref.") and name.endswith(".mean"):
            point = name[len("ref.") : -len(".mean")]
            missing = [k for k in (f"ref.{point}.var", f"ref.{point}.count") if k not in checkpoint.tensors]
            if missing:
                raise CheckpointFormatError(f"incomplete reference statistics, missing {missing}", 0)
            points[point] = ChannelStats.from_arrays(
                checkpoint.tensors[f"ref.{point}.mean"],
                checkpoint.tensors[f"ref.{point}.var"],
                int(checkpoint.tensors[f"ref.{point}.count"]),
            )
    return ReferenceStore(points=points, attachment=list(checkpoint.attachment))


def restore_optimizer(checkpoint: Checkpoint) -> AdamState:
    state = AdamState.from_config(checkpoint.config.train.optimizer)
    if "adam.step" in checkpoint.tensors:
        state.step = int(checkpoint.tensors["adam.step"])
    for name, array in checkpoint.tensors.items():
        if name.startswith("adam.m."):
            key = name[len("adam.m.") :]
            state.m[key] = array.copy()
            state.v[key] = checkpoint.tensors[f"adam.v.{key}"].copy()
    return state


def restore_rng(checkpoint: Checkpoint) -> np.random.Generator:
    rng = np.random.default_rng()
    rng.bit_generator.state = checkpoint.rng_state
    return rng
