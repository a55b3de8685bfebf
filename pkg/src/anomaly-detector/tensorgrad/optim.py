import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from datamodels import ContractError, OptimizerConfig

from .tensor import Tensor

logger = logging.getLogger(__name__)


@dataclass
class AdamState:
    """Adam moments keyed by parameter name"""

    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-4
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def from_config(cls, config: OptimizerConfig) -> "AdamState":
        return cls(**config.model_dump())


def _key(param: Tensor, index: int) -> str:
    return param.name if param.name else f"param{index}"


def adam_step(params: Sequence[Tensor], state: AdamState, lr: Optional[float] = None) -> None:
    """
    One Adam update with decoupled weight decay.

    Gradients are left in place; the caller zeroes them.
    """
    lr = state.lr if lr is None else lr

    for index, param in enumerate(params):
        if param.grad is None:
            raise ContractError(f"parameter '{_key(param, index)}' has no gradient")
        key = _key(param, index)
        if key in state.m and state.m[key].shape != param.shape:
            raise ContractError(f"optimizer state for '{key}' has shape {state.m[key].shape}, parameter {param.shape}")

    t = state.step + 1
    correction1 = 1.0 - state.beta1**t
    correction2 = 1.0 - state.beta2**t

    for index, param in enumerate(params):
        key = _key(param, index)
        grad = param.grad
        m = state.m.get(key)
        v = state.v.get(key)
        if m is None:
            m = np.zeros_like(param.data)
            v = np.zeros_like(param.data)

        m = state.beta1 * m + (1.0 - state.beta1) * grad
        v = state.beta2 * v + (1.0 - state.beta2) * grad * grad
        m_hat = m / correction1
        v_hat = v / correction2

        update = m_hat / (np.sqrt(v_hat) + state.eps)
        if state.weight_decay:
            update = update + state.weight_decay * param.data
        param.data = (param.data - lr * update).astype(param.data.dtype, copy=False)

        state.m[key] = m.astype(param.data.dtype, copy=False)
        state.v[key] = v.astype(param.data.dtype, copy=False)

    state.step = t
