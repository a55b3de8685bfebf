"""
Dense tensor with a reverse-mode tape.

Every differentiable primitive appends one node to the active Graph; backward
walks the nodes in strict reverse recording order, so gradients are
deterministic for an identical graph.
"""

import contextlib
import logging
from dataclasses import dataclass
from typing import Callable, Iterator, Optional, Sequence

import numpy as np

from datamodels import ContractError, NonFiniteError

logger = logging.getLogger(__name__)

_DTYPES = {"f32": np.float32, "f64": np.float64}

_state = {"dtype": np.float32, "grad_enabled": True}
_graph_stack: list["Graph"] = []


# ============================================================================
# Global modes
# ============================================================================


def default_dtype() -> type:
    return _state["dtype"]


def grad_enabled() -> bool:
    return _state["grad_enabled"]


@contextlib.contextmanager
def precision(mode: str) -> Iterator[None]:
    """Run the enclosed block in 'f32' (training) or 'f64' (verify) mode."""
    if mode not in _DTYPES:
        raise ContractError(f"precision must be one of {list(_DTYPES)}, got '{mode}'")
    previous = _state["dtype"]
    _state["dtype"] = _DTYPES[mode]
    try:
        yield
    finally:
        _state["dtype"] = previous


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    previous = _state["grad_enabled"]
    _state["grad_enabled"] = False
    try:
        yield
    finally:
        _state["grad_enabled"] = previous


# ============================================================================
# Graph
# ============================================================================

BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


@dataclass
class Node:
    node_id: int
    op: str
    inputs: tuple["Tensor", ...]
    output: "Tensor"
    backward: BackwardFn


class Graph:
    """Append-only record of primitive applications"""

    def __init__(self):
        self.nodes: list[Node] = []

    def record(self, op: str, inputs: Sequence["Tensor"], output: "Tensor", backward: BackwardFn) -> None:
        node = Node(len(self.nodes), op, tuple(inputs), output, backward)
        self.nodes.append(node)
        output._graph = self
        output._node_id = node.node_id

    def __len__(self) -> int:
        return len(self.nodes)

    def __enter__(self) -> "Graph":
        _graph_stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _graph_stack.pop()


_default_graph = Graph()


def current_graph() -> Graph:
    return _graph_stack[-1] if _graph_stack else _default_graph


# ============================================================================
# Tensor
# ============================================================================


class Tensor:
    """Row-major scalar array with an optional gradient slot"""

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None, dtype=None):
        self.data = np.array(data, dtype=dtype or default_dtype())
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._graph: Optional[Graph] = None
        self._node_id: Optional[int] = None

    @classmethod
    def wrap(cls, array: np.ndarray) -> "Tensor":
        """Adopt an array without copying (dtype follows the active mode)."""
        tensor = cls.__new__(cls)
        tensor.data = np.asarray(array, dtype=default_dtype())
        tensor.requires_grad = False
        tensor.grad = None
        tensor.name = None
        tensor._graph = None
        tensor._node_id = None
        return tensor

    def __repr__(self) -> str:
        label = f" '{self.name}'" if self.name else ""
        return f"<Tensor{label} shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad}>"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._node_id is None

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def check_finite(self, term: Optional[str] = None) -> "Tensor":
        if not np.all(np.isfinite(self.data)):
            raise NonFiniteError(term or self.name or "tensor", f"shape {self.shape}")
        return self

    def backward(self, graph: Optional[Graph] = None) -> None:
        backward(self, graph)

    # arithmetic sugar, resolved against tensorgrad.ops

    def __add__(self, other):
        return ops.add(self, other)

    def __radd__(self, other):
        return ops.add(other, self)

    def __sub__(self, other):
        return ops.sub(self, other)

    def __rsub__(self, other):
        return ops.sub(other, self)

    def __mul__(self, other):
        return ops.mul(self, other)

    def __rmul__(self, other):
        return ops.mul(other, self)

    def __truediv__(self, other):
        return ops.div(self, other)

    def __neg__(self):
        return ops.neg(self)

    def __matmul__(self, other):
        return ops.matmul(self, other)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return ops.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return ops.mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)


def parameter(array: np.ndarray, name: str, trainable: bool = True) -> Tensor:
    return Tensor(array, requires_grad=trainable, name=name)


# ============================================================================
# Backward
# ============================================================================


def backward(loss: Tensor, graph: Optional[Graph] = None) -> None:
    """
    Populate .grad of every requires_grad leaf reachable from a scalar loss.

    Gradients accumulate into existing .grad arrays; callers zero them.
    """
    if loss.size != 1:
        raise ContractError(f"backward requires a scalar loss, got shape {loss.shape}")

    if graph is None:
        graph = loss._graph if loss._graph is not None else current_graph()

    if loss.is_leaf:
        if loss.requires_grad:
            _accumulate_leaf(loss, np.ones_like(loss.data))
        return

    if loss._graph is not graph:
        raise ContractError("loss was not recorded on the given graph")

    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}

    for node in reversed(graph.nodes[: loss._node_id + 1]):
        upstream = pending.pop(id(node.output), None)
        if upstream is None:
            continue

        for tensor, grad in zip(node.inputs, node.backward(upstream)):
            if grad is None or not tensor.requires_grad:
                continue
            if tensor.is_leaf:
                _accumulate_leaf(tensor, grad)
            elif id(tensor) in pending:
                pending[id(tensor)] = pending[id(tensor)] + grad
            else:
                pending[id(tensor)] = grad


def _accumulate_leaf(tensor: Tensor, grad: np.ndarray) -> None:
    grad = np.asarray(grad, dtype=tensor.data.dtype).reshape(tensor.shape)
    if tensor.grad is None:
        tensor.grad = grad.copy()
    else:
        tensor.grad = tensor.grad + grad


from . import ops  # noqa: E402  (ops needs Tensor defined)
