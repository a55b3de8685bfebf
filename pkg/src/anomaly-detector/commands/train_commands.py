"""
Reference statistics and training commands
"""

import logging
from pathlib import Path

from checkpoint_store import (
    load_checkpoint,
    restore_model,
    restore_optimizer,
    restore_references,
    restore_rng,
    save_checkpoint,
)
from datamodels import ConfigurationError
from tensorgrad import AdamState
from training import train
from utils.run_ledger import RunLedger

from .common import config_from_args, load_train_images, loop_rng, output_dir, prepare_run

logger = logging.getLogger(__name__)


def cmd_stats(args) -> dict:
    """
    Precompute full-modality reference statistics and write a step-0 checkpoint.

    Training from this checkpoint is identical to training with the
    statistics computed inline.
    """
    if not args.ckpt:
        raise ConfigurationError("--ckpt <output path> is required")
    cfg = config_from_args(args)
    train_split = load_train_images(args.data, cfg)

    model, refs = prepare_run(cfg, train_split.images)
    save_checkpoint(args.ckpt, model, refs, cfg, 0, loop_rng(cfg), AdamState.from_config(cfg.train.optimizer))
    return {
        "status": "success",
        "ckpt": str(args.ckpt),
        "points": {p: s.count for p, s in refs.points.items()},
    }


def cmd_train(args) -> dict:
    """
    Train from scratch, or continue from --resume (a stats or mid-run checkpoint).

    Periodic checkpoints go next to --ckpt as <stem>_step<k>.anyad; the loss
    curve is recorded in the run ledger of the checkpoint directory.
    """
    if not args.ckpt:
        raise ConfigurationError("--ckpt <output path> is required")
    ckpt_path = Path(args.ckpt)

    if args.resume:
        checkpoint = load_checkpoint(args.resume)
        cfg = checkpoint.config
        if args.seed is not None and args.seed != cfg.train.seed:
            raise ConfigurationError(f"--seed {args.seed} conflicts with the resumed run's seed {cfg.train.seed}")
        train_split = load_train_images(args.data, cfg)
        model = restore_model(checkpoint)
        refs = restore_references(checkpoint)
        opt_state = restore_optimizer(checkpoint)
        rng = restore_rng(checkpoint)
        start = checkpoint.step
    else:
        cfg = config_from_args(args)
        train_split = load_train_images(args.data, cfg)
        model, refs = prepare_run(cfg, train_split.images)
        opt_state = AdamState.from_config(cfg.train.optimizer)
        rng = loop_rng(cfg)
        start = 0

    def on_checkpoint(step: int, state: AdamState) -> Path:
        path = ckpt_path.with_name(f"{ckpt_path.stem}_step{step:06d}{ckpt_path.suffix or '.anyad'}")
        return save_checkpoint(path, model, refs, cfg, step, rng, state)

    reports = train(
        model,
        train_split.images,
        refs,
        cfg,
        rng,
        opt_state=opt_state,
        start_step=start,
        on_checkpoint=on_checkpoint,
        progress=not getattr(args, "quiet", False),
    )
    save_checkpoint(ckpt_path, model, refs, cfg, cfg.train.steps, rng, opt_state)

    ledger = RunLedger(output_dir(args, ckpt_path.parent))
    ledger.record_curve(
        ckpt_path.name,
        reports,
        summary={
            "seed": cfg.train.seed,
            "steps": cfg.train.steps,
            "align_points": cfg.train.align_points,
            "lambda2": cfg.train.lambda2,
            "final_loss": reports[-1].total if reports else None,
        },
    )
    return {
        "status": "success",
        "ckpt": str(ckpt_path),
        "steps": cfg.train.steps,
        "final_loss": reports[-1].total if reports else None,
    }
