from .blobs import SliceSample, blob_read, blob_write, decode_blob, encode_blob
from .manifest import DatasetSplit, LoadedSplit, load_manifest, load_split, split_dataset, write_dataset
from .nifti import NiftiVolume, nifti_encode, nifti_read
from .slices import SliceProtocol, extract_slices
from .synth import render_sample, synth_generate

__all__ = [
    "DatasetSplit",
    "LoadedSplit",
    "NiftiVolume",
    "SliceProtocol",
    "SliceSample",
    "blob_read",
    "blob_write",
    "decode_blob",
    "encode_blob",
    "extract_slices",
    "load_manifest",
    "load_split",
    "nifti_encode",
    "nifti_read",
    "render_sample",
    "split_dataset",
    "synth_generate",
    "write_dataset",
]
