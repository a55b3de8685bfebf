"""
Dataset commands: synthetic generation and NIfTI case ingestion
"""

import logging
from pathlib import Path
from typing import Optional

from pydantic import ValidationError

from datamodels import MODALITY_NAMES, ConfigurationError
from dataio import SliceProtocol, extract_slices, nifti_read, split_dataset, synth_generate, write_dataset
from utils.validation import sanitize_sample_id

logger = logging.getLogger(__name__)

NIFTI_SUFFIXES = (".nii.gz", ".nii", ".hdr.gz", ".hdr")


def cmd_synth(args) -> dict:
    """
    Write a seeded synthetic dataset (blobs + manifest).

    Args:
        args.out: Output directory
        args.seed: Generator seed
        args.n_normal / args.n_abnormal / args.n_test_normal: Sample counts
        args.size: Image side length

    Returns:
        Status with the split counts
    """
    if not args.out:
        raise ConfigurationError("--out <dir> is required")
    seed = 1 if args.seed is None else args.seed
    manifest = synth_generate(
        args.n_normal,
        args.n_abnormal,
        seed,
        args.out,
        n_test_normal=args.n_test_normal,
        size=args.size,
    )
    return {"status": "success", "out": str(args.out), "counts": manifest.counts}


def _find_volume(case_dir: Path, case: str, suffix: str) -> Optional[Path]:
    for ext in NIFTI_SUFFIXES:
        candidate = case_dir / f"{case}_{suffix}{ext}"
        if candidate.exists():
            return candidate
    return None


def cmd_ingest(args) -> dict:
    """
    Ingest case directories laid out as <case>/<case>_{flair,t1,t2,seg}.nii.gz.

    Args:
        args.data: Directory of case directories
        args.out: Output dataset directory
        args.seed: Split seed

    Returns:
        Status with the split counts
    """
    if not args.data or not args.out:
        raise ConfigurationError("--data <cases dir> and --out <dir> are required")
    root = Path(args.data)
    if not root.is_dir():
        raise ConfigurationError(f"{root} is not a directory")

    try:
        protocol = SliceProtocol(axis=args.axis, start=args.slice_start, stop=args.slice_stop, stride=args.stride)
    except ValidationError as e:
        raise ConfigurationError(f"invalid slice protocol: {e}") from e
    samples = []
    for case_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        case = case_dir.name
        paths = [_find_volume(case_dir, case, m) for m in MODALITY_NAMES]
        if any(p is None for p in paths):
            logger.warning(f"skipping {case}: missing one of {MODALITY_NAMES}")
            continue
        volumes = [nifti_read(p).voxels for p in paths]
        seg_path = _find_volume(case_dir, case, "seg")
        seg = nifti_read(seg_path).voxels if seg_path else None
        samples.extend(extract_slices(volumes, seg, protocol, volume_id=sanitize_sample_id(case)))

    if not samples:
        raise ConfigurationError(f"no complete cases found under {root}")

    seed = 0 if args.seed is None else args.seed
    manifest = write_dataset(split_dataset(samples, seed), args.out)
    return {"status": "success", "out": str(args.out), "counts": manifest.counts}
