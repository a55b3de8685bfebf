"""
Evaluation grid, single-sample inference and experiment summaries
"""

import contextlib
import logging
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from checkpoint_store import load_checkpoint, restore_model, restore_references
from datamodels import ComboMetrics, ConfigurationError, ModalityMask
from dataio import blob_read, load_manifest, load_split
from metrics import evaluate_scores
from scoring import AnomalyMap, normalization_bounds, score_images, write_heatmap, write_map_blob
from storage import read_yaml, staged_directory, write_yaml
from utils.run_ledger import RunLedger
from utils.validation import parse_combos, sanitize_sample_id

from .common import check_image_size

logger = logging.getLogger(__name__)

REPORT_FILE = "report.yaml"
METRIC_KEYS = tuple(ComboMetrics.model_fields)


# ============================================================================
# Evaluation grid
# ============================================================================


def evaluate_grid(model, test, combos: Sequence[int], cfg) -> tuple[dict[int, ComboMetrics], dict[int, list[AnomalyMap]]]:
    rows: dict[int, ComboMetrics] = {}
    maps: dict[int, list[AnomalyMap]] = {}
    for combo in combos:
        mask = ModalityMask.from_combo(combo)
        maps[combo] = score_images(model, test.images, mask, cfg.score)
        rows[combo] = evaluate_scores(
            np.array([m.image_score for m in maps[combo]]),
            test.labels,
            [m.values for m in maps[combo]],
            list(test.masks),
            fpr_limit=cfg.score.aupro_fpr_limit,
            aupro_mode=cfg.score.aupro_mode,
        )
        logger.debug(f"combo {combo} [{mask.describe()}]: " + ", ".join(f"{k} {v:.4f}" for k, v in rows[combo]))
    return rows, maps


def average_row(rows: dict[int, ComboMetrics]) -> dict[str, float]:
    return {key: float(np.mean([getattr(r, key) for r in rows.values()])) for key in METRIC_KEYS}


def build_report(ckpt: str, data: str, step: int, counts: dict, rows: dict[int, ComboMetrics], bounds, training) -> dict[str, Any]:
    image_aurocs = [r.auroc_img for r in rows.values()]
    return {
        "checkpoint": ckpt,
        "data": data,
        "step": step,
        "counts": counts,
        "combos": {combo: row.model_dump() for combo, row in rows.items()},
        "avg": average_row(rows),
        "image_auroc_std": float(np.std(image_aurocs)),
        "normalization": {"min": bounds[0], "max": bounds[1]},
        "training": training,
    }


def cmd_eval(args) -> dict:
    """
    Score the test split of --data under every requested combination.

    Writes <out>/report.yaml and, with --heatmaps, one PNG per sample and
    combination under <out>/heatmaps/combo<k>/.
    """
    if not args.ckpt or not args.data:
        raise ConfigurationError("eval requires --ckpt and --data")
    combos = parse_combos(args.combos or "all")
    checkpoint = load_checkpoint(args.ckpt)
    cfg = checkpoint.config
    restore_references(checkpoint).check()
    model = restore_model(checkpoint)

    manifest, root = load_manifest(args.data)
    test = load_split(manifest, root, "test", channels=cfg.encoder.in_channels)
    check_image_size(test, cfg)
    if len(test.ids) == 0:
        raise ConfigurationError(f"manifest {args.data} has no test samples")

    rows, maps = evaluate_grid(model, test, combos, cfg)
    bounds = normalization_bounds([m for combo_maps in maps.values() for m in combo_maps])

    ckpt_path = Path(args.ckpt)
    training = RunLedger(ckpt_path.parent).get_run(ckpt_path.name)
    report = build_report(
        str(args.ckpt),
        str(args.data),
        checkpoint.step,
        manifest.counts,
        rows,
        bounds,
        training["summary"] if training else None,
    )

    out_dir = Path(args.out or "reports")
    # the report lands before the staged heatmaps are swapped in
    heatmaps = staged_directory(out_dir / "heatmaps") if args.heatmaps else contextlib.nullcontext()
    with heatmaps as staging:
        if staging is not None:
            for combo, combo_maps in maps.items():
                for sample_id, anomaly_map in zip(test.ids, combo_maps):
                    name = sanitize_sample_id(sample_id)
                    write_heatmap(staging / f"combo{combo}" / f"{name}.png", anomaly_map.values, bounds)
        report_path = write_yaml(out_dir / REPORT_FILE, report)
    logger.info(f"report written: {report_path}")
    return {"status": "success", "report": str(report_path), "avg_auroc_img": report["avg"]["auroc_img"]}


# ============================================================================
# Single sample
# ============================================================================


def cmd_infer(args) -> dict:
    """
    Score one sample blob under one combination (default 7); writes the
    heatmap PNG (own min-max bounds) and the raw map blob to --out.
    """
    if not args.ckpt or not args.data:
        raise ConfigurationError("infer requires --ckpt and --data <sample blob>")
    combos = parse_combos(args.combos or "7")
    if len(combos) != 1:
        raise ConfigurationError("infer takes exactly one combo")
    checkpoint = load_checkpoint(args.ckpt)
    model = restore_model(checkpoint)

    sample = blob_read(args.data)
    expected = (checkpoint.config.encoder.in_channels, checkpoint.config.encoder.image_size, checkpoint.config.encoder.image_size)
    if sample.channels.shape != expected:
        raise ConfigurationError(f"sample is {sample.channels.shape}, the model expects {expected}")

    (anomaly_map,) = score_images(model, sample.channels[None], ModalityMask.from_combo(combos[0]), checkpoint.config.score)
    out_dir = Path(args.out or ".")
    name = f"{sanitize_sample_id(sample.id)}_combo{combos[0]}"
    values = anomaly_map.values
    png = write_heatmap(out_dir / f"{name}.png", values, (float(values.min()), float(values.max())))
    write_map_blob(out_dir / f"{name}.adsl", values)
    return {"status": "success", "image_score": anomaly_map.image_score, "heatmap": str(png)}


# ============================================================================
# Experiment helpers
# ============================================================================


def ablation_summary(report_paths: Sequence[str]) -> dict[str, float]:
    """Mean and spread of the cross-combination image-AUROC std over a set of reports (e.g. seeds)."""
    stds = []
    for path in report_paths:
        report = read_yaml(path)
        stds.append(float(np.std([row["auroc_img"] for row in report["combos"].values()])))
    if not stds:
        raise ConfigurationError("ablation_summary needs at least one report")
    return {"mean_image_auroc_std": float(np.mean(stds)), "runs": len(stds), "max_image_auroc_std": float(np.max(stds))}
