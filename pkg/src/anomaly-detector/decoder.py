"""
INP-guided reconstruction decoder.

Decoder tokens query the refined prototypes through ReLU linear attention;
no encoder tokens ever enter as keys or values, so anything the prototypes
cannot express is reconstructed poorly.
"""

import logging

import numpy as np

from datamodels import DecoderConfig, ShapeError
from encoder import fuse_layers
from tensorgrad import Tensor, ops
from tensorgrad.layers import Params, apply_ffn, apply_linear, init_ffn, init_linear

logger = logging.getLogger(__name__)

ROW_EPS = 1e-6


def init_decoder_params(cfg: DecoderConfig, dim: int, rng: np.random.Generator) -> Params:
    params: Params = {}
    for layer in range(1, cfg.depth + 1):
        name = f"decoder.block{layer}"
        for proj in ("q", "k", "v"):
            init_linear(params, rng, f"{name}.{proj}", dim, dim, bias=False)
        init_ffn(params, rng, f"{name}.ffn", dim)
    return params


def prototype_attention(f_in: Tensor, p: Tensor, params: Params, name: str, normalize: bool) -> Tensor:
    """ReLU(Q K^T), optionally row-normalized: [B, T, N]."""
    q = apply_linear(f_in, params, f"{name}.q")
    k = apply_linear(p, params, f"{name}.k")
    scores = ops.relu(ops.matmul(q, ops.transpose_last(k)))
    if normalize:
        scores = ops.div(scores, ops.add(ops.sum(scores, axis=-1, keepdims=True), ROW_EPS))
    return scores


def block_forward(
    f_in: Tensor,
    p: Tensor,
    params: Params,
    name: str,
    normalize_attention: bool = True,
    attn_residual: bool = False,
) -> Tensor:
    if f_in.ndim != 3 or p.ndim != 3 or f_in.shape[-1] != p.shape[-1] or f_in.shape[0] != p.shape[0]:
        raise ShapeError(f"decoder block: tokens {f_in.shape} and prototypes {p.shape} differ")
    v = apply_linear(p, params, f"{name}.v")
    attended = ops.matmul(prototype_attention(f_in, p, params, name, normalize_attention), v)
    if attn_residual:
        attended = ops.add(attended, f_in)
    return ops.add(apply_ffn(attended, params, f"{name}.ffn"), attended)


def decode(f_bottleneck: Tensor, p: Tensor, cfg: DecoderConfig, params: Params) -> tuple[Tensor, Tensor]:
    """Run every block from the bottleneck output; fuse the two block groups into De0, De1."""
    outputs = []
    h = f_bottleneck
    for layer in range(1, cfg.depth + 1):
        h = block_forward(
            h,
            p,
            params,
            f"decoder.block{layer}",
            normalize_attention=cfg.normalize_attention,
            attn_residual=cfg.attn_residual,
        )
        outputs.append(h)
    return fuse_layers(outputs, cfg.group0_layers), fuse_layers(outputs, cfg.group1_layers)
