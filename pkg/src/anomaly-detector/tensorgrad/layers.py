"""Parameter initializers and the small blocks shared by every model part."""

import numpy as np

from .ops import gelu, layer_norm, linear
from .tensor import Tensor, parameter

Params = dict[str, Tensor]


def init_linear(
    params: Params,
    rng: np.random.Generator,
    name: str,
    fan_in: int,
    fan_out: int,
    bias: bool = True,
    trainable: bool = True,
) -> None:
    std = 1.0 / np.sqrt(fan_in)
    params[f"{name}.w"] = parameter(rng.normal(0.0, std, size=(fan_in, fan_out)), f"{name}.w", trainable)
    if bias:
        params[f"{name}.b"] = parameter(np.zeros(fan_out), f"{name}.b", trainable)


def init_norm(params: Params, name: str, dim: int, trainable: bool = True) -> None:
    params[f"{name}.g"] = parameter(np.ones(dim), f"{name}.g", trainable)
    params[f"{name}.b"] = parameter(np.zeros(dim), f"{name}.b", trainable)


def init_ffn(params: Params, rng: np.random.Generator, name: str, dim: int, trainable: bool = True) -> None:
    init_norm(params, f"{name}.norm", dim, trainable)
    init_linear(params, rng, f"{name}.fc1", dim, 4 * dim, trainable=trainable)
    init_linear(params, rng, f"{name}.fc2", 4 * dim, dim, trainable=trainable)


def apply_linear(x: Tensor, params: Params, name: str) -> Tensor:
    return linear(x, params[f"{name}.w"], params.get(f"{name}.b"))


def apply_norm(x: Tensor, params: Params, name: str) -> Tensor:
    return layer_norm(x, params[f"{name}.g"], params[f"{name}.b"], eps=1e-6)


def apply_ffn(x: Tensor, params: Params, name: str) -> Tensor:
    """LayerNorm -> Linear(D, 4D) -> GELU -> Linear(4D, D), no residual."""
    h = apply_linear(apply_norm(x, params, f"{name}.norm"), params, f"{name}.fc1")
    return apply_linear(gelu(h), params, f"{name}.fc2")
