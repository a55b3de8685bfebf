"""
Differentiable primitives over Tensor.

Each primitive computes its forward value with numpy and, when any input
requires a gradient, records a closure returning the input gradients.
"""

import math
from typing import Optional, Sequence, Union

import numpy as np
from scipy.special import erf

from datamodels import ContractError, ShapeError

from .tensor import Tensor, current_graph, default_dtype, grad_enabled

Operand = Union[Tensor, float, int, np.ndarray]

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


# ============================================================================
# Helpers
# ============================================================================


def as_tensor(value: Operand) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor.wrap(np.asarray(value, dtype=default_dtype()))


def _result(data: np.ndarray, inputs: Sequence[Tensor], op: str, backward) -> Tensor:
    out = Tensor.wrap(data)
    if grad_enabled() and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        current_graph().record(op, inputs, out, backward)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to an operand's shape."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ============================================================================
# Elementwise
# ============================================================================


def add(a: Operand, b: Operand) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), "add", backward)


def sub(a: Operand, b: Operand) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(a.data - b.data, (a, b), "sub", backward)


def mul(a: Operand, b: Operand) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(a.data * b.data, (a, b), "mul", backward)


def div(a: Operand, b: Operand) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "div")
    out = a.data / b.data

    def backward(g):
        ga = g / b.data
        return _unbroadcast(ga, a.shape), _unbroadcast(-ga * out, b.shape)

    return _result(out, (a, b), "div", backward)


def neg(a: Operand) -> Tensor:
    a = as_tensor(a)
    return _result(-a.data, (a,), "neg", lambda g: (-g,))


def square(a: Operand) -> Tensor:
    a = as_tensor(a)
    return _result(a.data * a.data, (a,), "square", lambda g: (2.0 * g * a.data,))


def relu(a: Tensor) -> Tensor:
    positive = a.data > 0
    return _result(np.where(positive, a.data, 0.0), (a,), "relu", lambda g: (g * positive,))


def gelu(a: Tensor) -> Tensor:
    """Exact (erf) GELU."""
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))

    def backward(g):
        pdf = np.exp(-0.5 * x * x) * _INV_SQRT2PI
        return (g * (cdf + x * pdf),)

    return _result(x * cdf, (a,), "gelu", backward)


# ============================================================================
# Shape
# ============================================================================


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}") from None
    return _result(out, (a,), "reshape", lambda g: (g.reshape(a.shape),))


def permute(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _result(np.transpose(a.data, axes), (a,), "permute", lambda g: (np.transpose(g, inverse),))


def transpose_last(a: Tensor) -> Tensor:
    return _result(np.swapaxes(a.data, -1, -2), (a,), "transpose", lambda g: (np.swapaxes(g, -1, -2),))


def broadcast_to(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    try:
        out = np.broadcast_to(a.data, shape)
    except ValueError:
        raise ShapeError(f"broadcast_to: cannot broadcast {a.shape} to {shape}") from None
    return _result(out.copy(), (a,), "broadcast", lambda g: (_unbroadcast(g, a.shape),))


def take(a: Tensor, index: int, axis: int = 0) -> Tensor:
    """a[..., index, ...] along one axis (the axis is dropped)."""

    def backward(g):
        grad = np.zeros_like(a.data)
        slicer = [slice(None)] * a.ndim
        slicer[axis] = index
        grad[tuple(slicer)] = g
        return (grad,)

    return _result(np.take(a.data, index, axis=axis), (a,), "take", backward)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ContractError("stack needs at least one tensor")
    shapes = {t.shape for t in tensors}
    if len(shapes) != 1:
        raise ShapeError(f"stack: mismatched shapes {sorted(shapes)}")

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _result(np.stack([t.data for t in tensors], axis=axis), tuple(tensors), "stack", backward)


# ============================================================================
# Reductions
# ============================================================================


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _result(out, (a,), "sum", backward)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([a.shape[ax] for ax in axes]))
    if count == 0:
        raise ContractError(f"mean over an empty extent of shape {a.shape}")
    return div(sum(a, axis=axis, keepdims=keepdims), float(count))


def min_lastdim(a: Tensor) -> tuple[Tensor, np.ndarray]:
    """
    Minimum over the last axis and its argmin (smallest index on ties).

    The gradient flows to the selected entry only.
    """
    index = np.argmin(a.data, axis=-1)
    values = np.take_along_axis(a.data, index[..., None], axis=-1)[..., 0]

    def backward(g):
        grad = np.zeros_like(a.data)
        np.put_along_axis(grad, index[..., None], g[..., None], axis=-1)
        return (grad,)

    return _result(values, (a,), "min", backward), index


# ============================================================================
# Linear algebra
# ============================================================================


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} are not aligned")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul: batch dims of {a.shape} and {b.shape} do not broadcast") from None

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _result(np.matmul(a.data, b.data), (a, b), "matmul", backward)


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """x[..., i] @ weight[i, o] (+ bias[o])."""
    if weight.ndim != 2 or x.shape[-1] != weight.shape[0]:
        raise ShapeError(f"linear: input {x.shape} does not match weight {weight.shape}")
    out = np.matmul(x.data, weight.data)
    if bias is not None:
        out = out + bias.data
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        flat_g = g.reshape(-1, g.shape[-1])
        gx = np.matmul(g, weight.data.T)
        gw = np.matmul(x.data.reshape(-1, x.shape[-1]).T, flat_g)
        if bias is None:
            return gx, gw
        return gx, gw, flat_g.sum(axis=0)

    return _result(out, inputs, "linear", backward)


# ============================================================================
# Fused kernels
# ============================================================================


def softmax_lastdim(x: Tensor) -> Tensor:
    if x.ndim == 0 or x.shape[-1] < 1:
        raise ShapeError(f"softmax needs a non-empty last dim, got {x.shape}")
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _result(out, (x,), "softmax", backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm: affine {gamma.shape}/{beta.shape} does not match last dim {d}")
    if eps <= 0:
        raise ContractError("layer_norm eps must be > 0")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    out = xhat * gamma.data + beta.data

    def backward(g):
        dxhat = g * gamma.data
        dx = inv_std * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        lead = tuple(range(x.ndim - 1))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _result(out, (x, gamma, beta), "layer_norm", backward)


def cosine_distance_rows(a: Tensor, b: Tensor, eps: float = 1e-8) -> Tensor:
    """1 - <a,b> / (max(|a|,eps) * max(|b|,eps)) along the last axis."""
    if a.shape != b.shape:
        raise ShapeError(f"cosine_distance_rows: shapes {a.shape} and {b.shape} differ")
    norm_a = np.sqrt((a.data * a.data).sum(axis=-1, keepdims=True))
    norm_b = np.sqrt((b.data * b.data).sum(axis=-1, keepdims=True))
    safe_a = np.maximum(norm_a, eps)
    safe_b = np.maximum(norm_b, eps)
    dot = (a.data * b.data).sum(axis=-1, keepdims=True)
    sim = dot / (safe_a * safe_b)

    def backward(g):
        g = -g[..., None]
        ga = b.data / (safe_a * safe_b) - np.where(norm_a > eps, sim / (safe_a * safe_a), 0.0) * a.data
        gb = a.data / (safe_a * safe_b) - np.where(norm_b > eps, sim / (safe_b * safe_b), 0.0) * b.data
        return g * ga, g * gb

    return _result(1.0 - sim[..., 0], (a, b), "cosine_distance", backward)
