"""
Objective and optimization loop.

One modality mask is drawn per batch. The objective is the adaptive
reconstruction loss plus lambda1 times the prototype consistency loss plus
lambda2 times the channel-statistics alignment loss.
"""

import logging
import sys
from pathlib import Path
from typing import Callable, Optional

import numpy as np
from tqdm import tqdm

from align import ReferenceStore
from datamodels import AnyADConfig, COMBINATIONS, ContractError, ModalityMask, NonFiniteError, ShapeError, StepReport, TrainConfig
from encoder import FeatureBundle
from inp import consistency_loss
from pipeline import AnyADModel
from tensorgrad import AdamState, Graph, Tensor, adam_step, backward, ops

logger = logging.getLogger(__name__)

WEIGHT_EPS = 1e-8

# ============================================================================
# Modality sampling
# ============================================================================


def sample_combo(rng: np.random.Generator, mode: str = "uniform7") -> ModalityMask:
    """One mask for the whole batch: uniform over the 7 non-empty subsets, or always full."""
    if mode == "full-only":
        return ModalityMask.full()
    if mode != "uniform7":
        raise ContractError(f"unknown combo sampling mode '{mode}'")
    return ModalityMask.from_combo(int(rng.integers(1, len(COMBINATIONS) + 1)))


# ============================================================================
# Loss terms
# ============================================================================


def adaptive_weights(d: np.ndarray, gamma: float, direction: str = "paper") -> np.ndarray:
    """
    Per-token difficulty weights, treated as constants by backward.

    "paper": (mean(d) / max(d_i, eps))^gamma
    "prose": (max(d_i, eps) / mean(d))^gamma
    """
    d = np.asarray(d, dtype=np.float64)
    if not np.any(d > 0):
        return np.ones_like(d)
    d_bar = d.mean()
    guarded = np.maximum(d, WEIGHT_EPS)
    ratio = d_bar / guarded if direction == "paper" else guarded / d_bar
    return ratio**gamma


def reconstruction_loss(en: FeatureBundle, de0: Tensor, de1: Tensor, omega: np.ndarray) -> Tensor:
    """Half the sum of both scales; per scale, weighted cosine distance summed over tokens, averaged over the batch."""
    if de0.shape != en.en0.shape or de1.shape != en.en1.shape:
        raise ShapeError(f"decoder outputs {de0.shape}/{de1.shape} do not match encoder {en.en0.shape}")
    if omega.shape != en.en0.shape[:2]:
        raise ShapeError(f"weights {omega.shape} do not match token grid {en.en0.shape[:2]}")
    weights = Tensor.wrap(omega)
    per_scale = []
    for enc, dec in ((en.en0, de0), (en.en1, de1)):
        weighted = ops.mul(ops.cosine_distance_rows(enc, dec), weights)
        per_scale.append(ops.mean(ops.sum(weighted, axis=1)))
    return ops.mul(ops.add(per_scale[0], per_scale[1]), 0.5)


def total_loss(l_rec: Tensor, l_con: Tensor, l_dist: Tensor, cfg: TrainConfig) -> Tensor:
    for term, value in (("rec", l_rec), ("con", l_con), ("dist", l_dist)):
        if value.size != 1:
            raise ContractError(f"loss term '{term}' must be scalar, got {value.shape}")
        value.check_finite(term)
    return ops.add(ops.add(l_rec, ops.mul(l_con, cfg.lambda1)), ops.mul(l_dist, cfg.lambda2))


def learning_rate(cfg: TrainConfig, step: int) -> float:
    """Constant, with an optional linear warmup over the first warmup_steps."""
    if cfg.warmup_steps > 0 and step < cfg.warmup_steps:
        return cfg.optimizer.lr * (step + 1) / cfg.warmup_steps
    return cfg.optimizer.lr


# ============================================================================
# Step and loop
# ============================================================================


def train_step(
    batch: np.ndarray,
    mask: ModalityMask,
    model: AnyADModel,
    refs: ReferenceStore,
    cfg: TrainConfig,
    opt_state: AdamState,
    step: int = 0,
) -> StepReport:
    """Forward, objective, backward and one Adam update; teacher parameters stay frozen."""
    refs.check()
    trainables = model.trainable()
    model.zero_grad()

    with Graph() as graph:
        out = model.forward(batch, mask)
        l_con = consistency_loss(out.inp.token_dist)
        omega = adaptive_weights(out.inp.token_dist.data, cfg.gamma, cfg.weight_direction)
        l_rec = reconstruction_loss(out.bundle, out.de0, out.de1, omega)
        l_dist = refs.alignment_loss(model.attachment_features(out))
        loss = total_loss(l_rec, l_con, l_dist, cfg)
        loss.check_finite("total")
        backward(loss, graph)

    squared = 0.0
    for param in trainables:
        if param.grad is None:
            param.grad = np.zeros_like(param.data)
        elif not np.all(np.isfinite(param.grad)):
            raise NonFiniteError(f"grad:{param.name}")
        squared += float(np.sum(param.grad.astype(np.float64) ** 2))

    lr = learning_rate(cfg, step)
    adam_step(trainables, opt_state, lr=lr)
    model.zero_grad()

    return StepReport(
        step=step + 1,
        total=loss.item(),
        rec=l_rec.item(),
        con=l_con.item(),
        dist=l_dist.item(),
        grad_norm=float(np.sqrt(squared)),
        lr=lr,
    )


def train(
    model: AnyADModel,
    images: np.ndarray,
    refs: ReferenceStore,
    cfg: AnyADConfig,
    rng: np.random.Generator,
    opt_state: Optional[AdamState] = None,
    start_step: int = 0,
    on_checkpoint: Optional[Callable[[int, AdamState], Path]] = None,
    progress: bool = True,
) -> list[StepReport]:
    """
    Run steps start_step..train.steps. Batches and masks are drawn from rng,
    so a run resumed from a checkpoint's rng state continues identically.

    Returns the logged step reports (every log_every steps and the last).
    """
    train_cfg = cfg.train
    if len(images) == 0:
        raise ContractError("training needs at least one normal sample")
    opt_state = opt_state or AdamState.from_config(train_cfg.optimizer)
    logged: list[StepReport] = []

    steps = tqdm(
        range(start_step, train_cfg.steps),
        desc="train",
        file=sys.stderr,
        disable=not progress,
        initial=start_step,
        total=train_cfg.steps,
    )
    for step in steps:
        mask = sample_combo(rng, train_cfg.combo_sampling)
        index = rng.integers(0, len(images), size=train_cfg.batch_size)
        report = train_step(images[index], mask, model, refs, train_cfg, opt_state, step=step)

        done = report.step
        if done % max(train_cfg.log_every, 1) == 0 or done == train_cfg.steps:
            logged.append(report)
            steps.set_postfix(loss=f"{report.total:.4f}")
            logger.debug(
                f"step {done} [{mask.describe()}]: total {report.total:.5f} rec {report.rec:.5f} "
                f"con {report.con:.5f} dist {report.dist:.6f} |g| {report.grad_norm:.4f}"
            )
        if on_checkpoint and train_cfg.checkpoint_every and done % train_cfg.checkpoint_every == 0:
            on_checkpoint(done, opt_state)

    return logged
