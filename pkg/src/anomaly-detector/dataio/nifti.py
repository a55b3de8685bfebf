"""
NIfTI-1 reader.

Single-file ("n+1") and paired header/image ("ni1", .hdr + .img) volumes,
optionally gzip-compressed. Byte order is taken from whichever reading of
sizeof_hdr yields 348. Orientation (qform/sform) is not interpreted.
"""

import gzip
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from datamodels import NiftiFormatError, UnsupportedDatatypeError
from storage import PathLike

logger = logging.getLogger(__name__)

HEADER_SIZE = 348
GZIP_MAGIC = b"\x1f\x8b"

# Field table of the NIfTI-1 header (struct syntax, name)
NIFTI1_FIELDS = [
    ("i", "sizeof_hdr"),
    ("10s", "data_type"),
    ("18s", "db_name"),
    ("i", "extents"),
    ("h", "session_error"),
    ("b", "regular"),
    ("b", "dim_info"),
    ("8h", "dim"),
    ("f", "intent_p1"),
    ("f", "intent_p2"),
    ("f", "intent_p3"),
    ("h", "intent_code"),
    ("h", "datatype"),
    ("h", "bitpix"),
    ("h", "slice_start"),
    ("8f", "pixdim"),
    ("f", "vox_offset"),
    ("f", "scl_slope"),
    ("f", "scl_inter"),
    ("h", "slice_end"),
    ("b", "slice_code"),
    ("b", "xyzt_units"),
    ("f", "cal_max"),
    ("f", "cal_min"),
    ("f", "slice_duration"),
    ("f", "toffset"),
    ("i", "glmax"),
    ("i", "glmin"),
    ("80s", "descrip"),
    ("24s", "aux_file"),
    ("h", "qform_code"),
    ("h", "sform_code"),
    ("f", "quatern_b"),
    ("f", "quatern_c"),
    ("f", "quatern_d"),
    ("f", "qoffset_x"),
    ("f", "qoffset_y"),
    ("f", "qoffset_z"),
    ("4f", "srow_x"),
    ("4f", "srow_y"),
    ("4f", "srow_z"),
    ("16s", "intent_name"),
    ("4s", "magic"),
]

NIFTI1_FORMAT = "".join(fmt for fmt, _ in NIFTI1_FIELDS)

# datatype code -> numpy scalar type (byte order applied at read time)
DATATYPES = {
    2: np.uint8,
    4: np.int16,
    8: np.int32,
    16: np.float32,
    64: np.float64,
}


@dataclass
class NiftiVolume:
    dims: tuple[int, ...]  # dim[1..dim[0]]
    datatype: int
    voxels: np.ndarray  # f32, shaped dims, x fastest in storage (Fortran order)
    pixdim: tuple[float, ...]
    byte_order: str  # "<" or ">"
    header: dict = field(default_factory=dict, repr=False)


# ============================================================================
# Header
# ============================================================================


def _read_bytes(path: Path) -> bytes:
    raw = path.read_bytes()
    if raw[:2] == GZIP_MAGIC:
        try:
            return gzip.decompress(raw)
        except (OSError, EOFError) as e:
            raise NiftiFormatError(f"corrupt gzip container: {e}", 0) from e
    return raw


def guess_byte_order(raw: bytes) -> str:
    if len(raw) < 4:
        raise NiftiFormatError("file too short for a NIfTI-1 header", len(raw))
    for order in ("<", ">"):
        if struct.unpack(order + "i", raw[:4])[0] == HEADER_SIZE:
            return order
    raise NiftiFormatError("sizeof_hdr is not 348 in either byte order", 0)


def parse_header(raw: bytes) -> tuple[dict, str]:
    order = guess_byte_order(raw)
    if len(raw) < HEADER_SIZE:
        raise NiftiFormatError(f"truncated header: {len(raw)} of {HEADER_SIZE} bytes", len(raw))

    values = struct.unpack(order + NIFTI1_FORMAT, raw[:HEADER_SIZE])
    header, index = {}, 0
    for fmt, name in NIFTI1_FIELDS:
        count = int(fmt[:-1]) if fmt[:-1] and fmt[-1] != "s" else 1
        if count == 1:
            header[name] = values[index]
        else:
            header[name] = tuple(values[index : index + count])
        index += count

    if header["magic"] not in (b"n+1\x00", b"ni1\x00"):
        raise NiftiFormatError(f"bad magic {header['magic']!r}", 344)
    rank = header["dim"][0]
    if not 1 <= rank <= 7:
        raise NiftiFormatError(f"dim[0] must be in 1..7, got {rank}", 40)
    if any(d < 1 for d in header["dim"][1 : rank + 1]):
        raise NiftiFormatError(f"non-positive dimension in {header['dim'][1:rank + 1]}", 42)
    return header, order


# ============================================================================
# Volume
# ============================================================================


def nifti_read(path: PathLike) -> NiftiVolume:
    path = Path(path)
    raw = _read_bytes(path)
    header, order = parse_header(raw)

    code = header["datatype"]
    if code not in DATATYPES:
        raise UnsupportedDatatypeError(f"unsupported datatype code {code}", 70)
    dtype = np.dtype(DATATYPES[code]).newbyteorder(order)

    if header["magic"] == b"n+1\x00":
        data, offset = raw, int(header["vox_offset"])
        if offset < HEADER_SIZE:
            raise NiftiFormatError(f"vox_offset {offset} lies inside the header", 108)
    else:
        image_path = _paired_image(path)
        if not image_path.exists():
            raise NiftiFormatError(f"paired image file {image_path.name} not found", 0)
        data, offset = _read_bytes(image_path), int(header["vox_offset"])

    rank = header["dim"][0]
    dims = tuple(int(d) for d in header["dim"][1 : rank + 1])
    count = int(np.prod(dims))
    needed = offset + count * dtype.itemsize
    if len(data) < needed:
        raise NiftiFormatError(f"truncated voxel data: need {needed} bytes, have {len(data)}", len(data))

    voxels = np.frombuffer(data, dtype=dtype, count=count, offset=offset).astype(np.float32)
    slope, inter = header["scl_slope"], header["scl_inter"]
    if slope != 0:
        voxels = (voxels * np.float32(slope) + np.float32(inter)).astype(np.float32)

    logger.debug(f"{path.name}: dims {dims}, datatype {code}, byte order '{order}'")
    return NiftiVolume(
        dims=dims,
        datatype=code,
        voxels=voxels.reshape(dims, order="F"),
        pixdim=tuple(float(p) for p in header["pixdim"][1 : rank + 1]),
        byte_order=order,
        header=header,
    )


def _paired_image(path: Path) -> Path:
    name = path.name
    for suffix in (".hdr.gz", ".hdr"):
        if name.endswith(suffix):
            base = name[: -len(suffix)]
            gz = path.with_name(base + ".img.gz")
            return gz if gz.exists() else path.with_name(base + ".img")
    return path.with_suffix(".img")


# ============================================================================
# Writer (fixtures and ingest round-trips)
# ============================================================================


def nifti_encode(voxels: np.ndarray, datatype: int = 16, byte_order: str = "<", slope: float = 0.0, inter: float = 0.0) -> bytes:
    """Single-file n+1 volume; voxels are stored x fastest."""
    if datatype not in DATATYPES:
        raise UnsupportedDatatypeError(f"unsupported datatype code {datatype}", 70)
    dtype = np.dtype(DATATYPES[datatype]).newbyteorder(byte_order)
    voxels = np.asarray(voxels)
    dims = voxels.shape
    values = {name: 0 for _, name in NIFTI1_FIELDS}
    values.update(
        sizeof_hdr=HEADER_SIZE,
        data_type=b"",
        db_name=b"",
        dim=(len(dims), *dims, *([1] * (7 - len(dims)))),
        datatype=datatype,
        bitpix=dtype.itemsize * 8,
        pixdim=(1.0,) * 8,
        vox_offset=352.0,
        scl_slope=slope,
        scl_inter=inter,
        descrip=b"",
        aux_file=b"",
        srow_x=(0.0,) * 4,
        srow_y=(0.0,) * 4,
        srow_z=(0.0,) * 4,
        intent_name=b"",
        magic=b"n+1\x00",
    )
    flat = []
    for _, name in NIFTI1_FIELDS:
        value = values[name]
        flat.extend(value if isinstance(value, tuple) else (value,))
    header = struct.pack(byte_order + NIFTI1_FORMAT, *flat)
    payload = np.asarray(voxels, dtype=dtype).tobytes(order="F")
    return header + b"\x00" * 4 + payload
