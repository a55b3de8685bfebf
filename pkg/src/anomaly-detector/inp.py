"""
Intrinsic normal prototypes (INPs).

Learnable initial prototypes cross-attend to the fused encoder tokens and
are refined by a feed-forward block; tokens are then matched to their
nearest prototype by cosine distance.
"""

import logging
import math
from dataclasses import dataclass

import numpy as np

from datamodels import InpConfig, ShapeError
from tensorgrad import Tensor, ops
from tensorgrad.layers import Params, apply_ffn, apply_linear, init_ffn, init_linear
from tensorgrad.tensor import parameter

logger = logging.getLogger(__name__)


@dataclass
class InpOutput:
    p: Tensor  # [B, N, D] refined prototypes
    token_dist: Tensor  # [B, T] distance to the nearest prototype
    assign: np.ndarray  # [B, T] nearest prototype index


def init_prototype_params(cfg: InpConfig, dim: int, rng: np.random.Generator) -> Params:
    params: Params = {}
    params["inp.p0"] = parameter(rng.normal(0.0, cfg.init_std, size=(cfg.num_prototypes, dim)), "inp.p0")
    for proj in ("q", "k", "v"):
        init_linear(params, rng, f"inp.{proj}", dim, dim)
    init_ffn(params, rng, "inp.ffn", dim)
    return params


def attention_weights(fq: Tensor, params: Params) -> Tensor:
    """softmax(Q K^T / sqrt(D)) with Q from P0 and K from the tokens: [B, N, T]."""
    d = fq.shape[-1]
    q = apply_linear(params["inp.p0"], params, "inp.q")
    k = apply_linear(fq, params, "inp.k")
    logits = ops.div(ops.matmul(q, ops.transpose_last(k)), math.sqrt(d))
    return ops.softmax_lastdim(logits)


def extract(fq: Tensor, params: Params) -> Tensor:
    """Refined prototypes P [B, N, D] from fused tokens fq [B, T, D]."""
    p0 = params["inp.p0"]
    if fq.ndim != 3 or fq.shape[-1] != p0.shape[-1]:
        raise ShapeError(f"extract: tokens {fq.shape} do not match prototypes {p0.shape}")
    v = apply_linear(fq, params, "inp.v")
    p_attn = ops.add(ops.matmul(attention_weights(fq, params), v), p0)
    return ops.add(apply_ffn(p_attn, params, "inp.ffn"), p_attn)


def nearest_distances(fq: Tensor, p: Tensor) -> tuple[Tensor, np.ndarray]:
    """
    Cosine distance of every token to its nearest prototype.

    Ties go to the smallest prototype index; the gradient flows through the
    selected prototype only.
    """
    if fq.ndim != 3 or p.ndim != 3 or fq.shape[0] != p.shape[0] or fq.shape[-1] != p.shape[-1]:
        raise ShapeError(f"nearest_distances: tokens {fq.shape} and prototypes {p.shape} differ")
    b, t, d = fq.shape
    n = p.shape[1]
    tokens = ops.broadcast_to(ops.reshape(fq, (b, t, 1, d)), (b, t, n, d))
    protos = ops.broadcast_to(ops.reshape(p, (b, 1, n, d)), (b, t, n, d))
    distances = ops.cosine_distance_rows(tokens, protos)
    return ops.min_lastdim(distances)


def consistency_loss(token_dist: Tensor) -> Tensor:
    """Mean nearest-prototype distance over all B*T tokens."""
    return ops.mean(token_dist)


def fused_query(en0: Tensor, en1: Tensor) -> Tensor:
    """Key/value source of the extractor: mean of the two encoder groups."""
    return ops.mul(ops.add(en0, en1), 0.5)


def run_inp(fq: Tensor, params: Params) -> InpOutput:
    p = extract(fq, params)
    token_dist, assign = nearest_distances(fq, p)
    return InpOutput(p=p, token_dist=token_dist, assign=assign)
