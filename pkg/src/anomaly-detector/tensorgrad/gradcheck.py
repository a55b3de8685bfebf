import logging
from typing import Callable, Sequence

import numpy as np
from pydantic import BaseModel

from .tensor import Graph, Tensor, backward, no_grad

logger = logging.getLogger(__name__)


class GradCheckEntry(BaseModel):
    name: str
    max_rel_error: float
    max_abs_error: float
    passed: bool


class GradCheckReport(BaseModel):
    entries: list[GradCheckEntry]
    tol: float
    atol: float

    @property
    def passed(self) -> bool:
        return all(entry.passed for entry in self.entries)

    @property
    def max_rel_error(self) -> float:
        return max((entry.max_rel_error for entry in self.entries), default=0.0)

    def failures(self) -> list[GradCheckEntry]:
        return [entry for entry in self.entries if not entry.passed]


def finite_diff_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    h: float = 1e-5,
    tol: float = 1e-4,
    atol: float = 1e-7,
) -> GradCheckReport:
    """
    Compare analytic gradients of a scalar closure against central differences.

    The error per parameter is max|analytic - numeric| over
    max(max|analytic|, max|numeric|, 1e-8). A parameter passes when that
    relative error is <= tol or the absolute error is <= atol; the latter
    covers gradients that are exactly zero, where only round-off is left.
    Run inside precision("f64").
    """
    for param in params:
        param.zero_grad()

    with Graph() as graph:
        loss = f()
        backward(loss, graph)

    entries = []
    for index, param in enumerate(params):
        analytic = param.grad if param.grad is not None else np.zeros_like(param.data)
        numeric = np.zeros_like(param.data)
        flat = param.data.reshape(-1)
        flat_numeric = numeric.reshape(-1)

        with no_grad():
            for i in range(flat.size):
                original = flat[i]
                flat[i] = original + h
                plus = f().item()
                flat[i] = original - h
                minus = f().item()
                flat[i] = original
                flat_numeric[i] = (plus - minus) / (2.0 * h)

        scale = max(float(np.abs(analytic).max()), float(np.abs(numeric).max()), 1e-8)
        abs_error = float(np.abs(analytic - numeric).max())
        error = abs_error / scale
        name = param.name or f"param{index}"
        entries.append(
            GradCheckEntry(name=name, max_rel_error=error, max_abs_error=abs_error, passed=error <= tol or abs_error <= atol)
        )
        logger.debug(f"gradcheck {name}: rel err {error:.3e}, abs err {abs_error:.3e}")

    return GradCheckReport(entries=entries, tol=tol, atol=atol)
