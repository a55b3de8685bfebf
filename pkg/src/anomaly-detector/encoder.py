"""
Frozen teacher encoder.

A small ViT over the stacked modality channels: patch embedding, pre-norm
transformer blocks, per-layer token grids. Shallow and deep layer groups are
fused into En0 / En1, which also feed the trainable expand-compress
bottleneck.
"""

import logging
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from datamodels import ContractError, EncoderConfig, ModalityMask, ShapeError, TeacherConfig
from tensorgrad import AdamState, Graph, Tensor, adam_step, backward, no_grad
from tensorgrad import ops
from tensorgrad.layers import (
    Params,
    apply_ffn,
    apply_linear,
    apply_norm,
    init_ffn,
    init_linear,
    init_norm,
)
from tensorgrad.tensor import parameter

logger = logging.getLogger(__name__)


@dataclass
class FeatureBundle:
    """Fused encoder token grids"""

    en0: Tensor
    en1: Tensor
    grid_h: int
    grid_w: int

    def __post_init__(self):
        if self.en0.shape != self.en1.shape:
            raise ShapeError(f"en0 {self.en0.shape} and en1 {self.en1.shape} differ")
        if self.en0.shape[1] != self.grid_h * self.grid_w:
            raise ShapeError(f"token count {self.en0.shape[1]} != {self.grid_h}x{self.grid_w}")


# ============================================================================
# Modality masking
# ============================================================================


def apply_modality_mask(x: Tensor, mask: ModalityMask) -> Tensor:
    """Zero every absent channel of a [B, C, H, W] batch; present channels are untouched."""
    if x.ndim != 4 or x.shape[1] != len(mask.present):
        raise ContractError(f"mask of length {len(mask.present)} does not match input {x.shape}")
    out = x.data.copy()
    for channel, present in enumerate(mask.present):
        if not present:
            out[:, channel] = 0.0
    return Tensor.wrap(out)


# ============================================================================
# Parameters
# ============================================================================


def init_encoder_params(cfg: EncoderConfig) -> Params:
    """Teacher parameters, seeded by cfg.seed and frozen (no gradients)."""
    rng = np.random.default_rng(cfg.seed)
    d = cfg.embed_dim
    patch_dim = cfg.in_channels * cfg.patch_size**2

    params: Params = {}
    init_linear(params, rng, "teacher.patch", patch_dim, d, trainable=False)
    params["teacher.pos"] = parameter(rng.normal(0.0, 0.02, size=(cfg.tokens, d)), "teacher.pos", trainable=False)

    for layer in range(1, cfg.depth + 1):
        name = f"teacher.block{layer}"
        init_norm(params, f"{name}.norm1", d, trainable=False)
        init_linear(params, rng, f"{name}.qkv", d, 3 * d, trainable=False)
        init_linear(params, rng, f"{name}.proj", d, d, trainable=False)
        init_ffn(params, rng, f"{name}.mlp", d, trainable=False)

    return params


def init_bottleneck_params(cfg: EncoderConfig, rng: np.random.Generator) -> Params:
    d = cfg.embed_dim
    params: Params = {}
    init_linear(params, rng, "bottleneck.expand", d, 4 * d)
    init_linear(params, rng, "bottleneck.compress", 4 * d, d)
    return params


def freeze(params: Params) -> None:
    for tensor in params.values():
        tensor.requires_grad = False
        tensor.grad = None


# ============================================================================
# Forward
# ============================================================================


def patchify(x: np.ndarray, patch_size: int) -> np.ndarray:
    """[B, C, H, W] -> [B, T, C*p*p] with tokens in raster order."""
    b, c, h, w = x.shape
    gh, gw = h // patch_size, w // patch_size
    patches = x.reshape(b, c, gh, patch_size, gw, patch_size)
    return patches.transpose(0, 2, 4, 1, 3, 5).reshape(b, gh * gw, c * patch_size * patch_size)


def _attention(x: Tensor, params: Params, name: str, heads: int) -> Tensor:
    b, t, d = x.shape
    dh = d // heads
    qkv = apply_linear(x, params, f"{name}.qkv")
    qkv = ops.permute(ops.reshape(qkv, (b, t, 3, heads, dh)), (2, 0, 3, 1, 4))
    q, k, v = (ops.take(qkv, i, axis=0) for i in range(3))
    logits = ops.div(ops.matmul(q, ops.transpose_last(k)), math.sqrt(dh))
    attended = ops.matmul(ops.softmax_lastdim(logits), v)
    merged = ops.reshape(ops.permute(attended, (0, 2, 1, 3)), (b, t, d))
    return apply_linear(merged, params, f"{name}.proj")


def embed(x: Tensor, cfg: EncoderConfig, params: Params) -> Tensor:
    if x.ndim != 4 or x.shape[1] != cfg.in_channels or x.shape[2:] != (cfg.image_size, cfg.image_size):
        raise ShapeError(
            f"encoder expects [B, {cfg.in_channels}, {cfg.image_size}, {cfg.image_size}], got {x.shape}"
        )
    tokens = Tensor.wrap(patchify(x.data, cfg.patch_size))
    return ops.add(apply_linear(tokens, params, "teacher.patch"), params["teacher.pos"])


def run_blocks(tokens: Tensor, cfg: EncoderConfig, params: Params) -> list[Tensor]:
    features = []
    h = tokens
    for layer in range(1, cfg.depth + 1):
        name = f"teacher.block{layer}"
        h = ops.add(h, _attention(apply_norm(h, params, f"{name}.norm1"), params, name, cfg.heads))
        h = ops.add(h, apply_ffn(h, params, f"{name}.mlp"))
        features.append(h)
    return features


def encode(x: Tensor, cfg: EncoderConfig, params: Params) -> list[Tensor]:
    """Post-block token grid [B, T, D] of every teacher layer (input already masked)."""
    return run_blocks(embed(x, cfg, params), cfg, params)


def fuse_layers(features: Sequence[Tensor], indices: Sequence[int]) -> Tensor:
    """Elementwise mean over the selected (1-based) layers."""
    if not indices:
        raise ContractError("fuse_layers needs a non-empty index set")
    out_of_range = [i for i in indices if not 1 <= i <= len(features)]
    if out_of_range:
        raise ContractError(f"layer indices {out_of_range} outside 1..{len(features)}")
    selected = [features[i - 1] for i in sorted(set(indices))]
    if len(selected) == 1:
        return selected[0]
    return ops.mean(ops.stack(selected, axis=0), axis=0)


def encode_bundle(x: Tensor, cfg: EncoderConfig, params: Params) -> FeatureBundle:
    features = encode(x, cfg, params)
    return FeatureBundle(
        en0=fuse_layers(features, cfg.shallow_layers),
        en1=fuse_layers(features, cfg.deep_layers),
        grid_h=cfg.grid,
        grid_w=cfg.grid,
    )


def bottleneck(en0: Tensor, en1: Tensor, params: Params, bypass_activation: bool = False) -> Tensor:
    """Linear(D, 4D) over en0 + en1, GELU, Linear(4D, D)."""
    if en0.shape != en1.shape:
        raise ShapeError(f"bottleneck inputs {en0.shape} and {en1.shape} differ")
    high = apply_linear(ops.add(en0, en1), params, "bottleneck.expand")
    if not bypass_activation:
        high = ops.gelu(high)
    return apply_linear(high, params, "bottleneck.compress")


# ============================================================================
# Optional teacher pretraining
# ============================================================================


def pretrain_teacher(
    params: Params,
    cfg: EncoderConfig,
    teacher_cfg: TeacherConfig,
    images: np.ndarray,
    rng: np.random.Generator,
    batch_size: int = 8,
) -> Optional[list[float]]:
    """
    Train the teacher as a masked-patch reconstructor, then freeze it.

    A random subset of patches is zeroed at the input; a linear pixel head on
    the last layer predicts the hidden patches (MSE on hidden patches only).
    """
    if teacher_cfg.pretrain_steps <= 0:
        return None
    if len(images) == 0:
        raise ContractError("teacher pretraining needs at least one normal image")

    teacher = [p for name, p in params.items() if name.startswith("teacher.")]
    for tensor in teacher:
        tensor.requires_grad = True

    head: Params = {}
    patch_dim = cfg.in_channels * cfg.patch_size**2
    init_linear(head, rng, "pretrain.head", cfg.embed_dim, patch_dim)
    trainables = teacher + list(head.values())
    state = AdamState(lr=teacher_cfg.pretrain_lr, weight_decay=0.0)

    losses = []
    for step in range(teacher_cfg.pretrain_steps):
        idx = rng.integers(0, len(images), size=min(batch_size, len(images)))
        patches = patchify(images[idx], cfg.patch_size)
        hidden = rng.random(patches.shape[:2]) < teacher_cfg.pretrain_mask_ratio
        visible = np.where(hidden[..., None], 0.0, patches)

        with Graph() as graph:
            tokens = ops.add(apply_linear(Tensor.wrap(visible), params, "teacher.patch"), params["teacher.pos"])
            last = run_blocks(tokens, cfg, params)[-1]
            prediction = apply_linear(last, head, "pretrain.head")
            weight = hidden[..., None].astype(prediction.data.dtype)
            residual = ops.mul(ops.sub(prediction, patches), weight)
            denom = max(float(weight.sum()) * patch_dim, 1.0)
            loss = ops.div(ops.sum(ops.square(residual)), denom)
            loss.check_finite("teacher_pretrain")
            backward(loss, graph)

        adam_step(trainables, state)
        for tensor in trainables:
            tensor.zero_grad()
        losses.append(loss.item())
        if step % 50 == 0:
            logger.debug(f"teacher pretrain step {step}: loss {losses[-1]:.5f}")

    freeze(params)
    logger.info(f"teacher pretrained for {teacher_cfg.pretrain_steps} steps, final loss {losses[-1]:.5f}")
    return losses


def encode_frozen(x: Tensor, cfg: EncoderConfig, params: Params) -> FeatureBundle:
    with no_grad():
        return encode_bundle(x, cfg, params)
