"""Dense float64 tensors and the tape that records them for reverse mode."""

from __future__ import annotations

import contextvars
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Any, Callable, Iterator, Optional, Sequence, Tuple

import numpy as np

from ..errors import DimensionError

BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]

_active_tape: contextvars.ContextVar[Optional["Tape"]] = contextvars.ContextVar(
    "csfiqa_active_tape", default=None
)
_grad_enabled: contextvars.ContextVar[bool] = contextvars.ContextVar(
    "csfiqa_grad_enabled", default=True
)


def _frozen_array(data: Any) -> np.ndarray:
    array = np.array(data, dtype=np.float64)
    array.setflags(write=False)
    return array


class Tensor:
    """
    Immutable N-dimensional float64 array with optional gradient tracking.

    ``data`` is never written in place; ``assign`` rebinds it to a fresh
    array so closures captured by earlier tape nodes keep their values.
    """

    __array_priority__ = 1000.0

    def __init__(self, data: Any, requires_grad: bool = False, name: Optional[str] = None):
        self.data = _frozen_array(data)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name

    @property
    def shape(self) -> Tuple[int, ...]:
        return tuple(self.data.shape)

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return int(self.data.size)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.size != 1:
            raise DimensionError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def assign(self, data: Any) -> None:
        """Replace the stored values, keeping the shape."""
        array = _frozen_array(data)
        if array.shape != self.data.shape:
            raise DimensionError(f"cannot assign shape {array.shape} to {self.data.shape}")
        self.data = array

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{label})"

    # Operator sugar; the differentiable definitions live in ops.
    def __add__(self, other: Any) -> "Tensor":
        from . import ops

        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other: Any) -> "Tensor":
        from . import ops

        return ops.sub(self, other)

    def __rsub__(self, other: Any) -> "Tensor":
        from . import ops

        return ops.sub(other, self)

    def __mul__(self, other: Any) -> "Tensor":
        from . import ops

        return ops.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other: Any) -> "Tensor":
        from . import ops

        return ops.div(self, other)

    def __rtruediv__(self, other: Any) -> "Tensor":
        from . import ops

        return ops.div(other, self)

    def __neg__(self) -> "Tensor":
        from . import ops

        return ops.neg(self)

    def __matmul__(self, other: Any) -> "Tensor":
        from . import ops

        return ops.matmul(self, other)

    def __getitem__(self, index: Any) -> "Tensor":
        from . import ops

        return ops.index(self, index)

    def reshape(self, *shape: int) -> "Tensor":
        from . import ops

        return ops.reshape(self, shape)

    def transpose(self, *axes: int) -> "Tensor":
        from . import ops

        return ops.transpose(self, axes or None)

    def sum(self, axis: Any = None, keepdims: bool = False) -> "Tensor":
        from . import ops

        return ops.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis: Any = None, keepdims: bool = False) -> "Tensor":
        from . import ops

        return ops.mean(self, axis=axis, keepdims=keepdims)


class Parameter(Tensor):
    """Model weight. Frozen parameters never take part in differentiation."""

    def __init__(self, data: Any, name: Optional[str] = None, frozen: bool = False):
        super().__init__(data, requires_grad=not frozen, name=name)
        self.frozen = frozen


@dataclass
class Node:
    """One recorded operation: its inputs, its output and the vector-Jacobian rule."""

    op: str
    inputs: Tuple[Tensor, ...]
    output: Tensor
    backward: BackwardFn


class Tape:
    """
    Ordered record of the operations of one graph.

    Nodes are appended in execution order, so the list is already
    topologically sorted; ``backward`` walks it once in reverse. A tape
    belongs to the context that entered it and must not be shared between
    threads.
    """

    def __init__(self) -> None:
        self.nodes: list[Node] = []
        self._token: Optional[contextvars.Token[Optional[Tape]]] = None

    def __enter__(self) -> "Tape":
        self._token = _active_tape.set(self)
        return self

    def __exit__(self, *exc: object) -> None:
        if self._token is not None:
            _active_tape.reset(self._token)
            self._token = None

    def record(self, node: Node) -> None:
        self.nodes.append(node)

    def backward(self, loss: Tensor) -> None:
        """
        Accumulate d(loss)/d(x) into ``x.grad`` for every recorded tensor x
        that requires a gradient.

        Args:
            loss: Scalar tensor produced on this tape
        """
        if loss.size != 1:
            raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")

        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        touched: dict[int, Tensor] = {id(loss): loss}

        for node in reversed(self.nodes):
            upstream = grads.pop(id(node.output), None)
            if upstream is None:
                continue
            for tensor, grad in zip(node.inputs, node.backward(upstream)):
                if grad is None or not tensor.requires_grad:
                    continue
                key = id(tensor)
                if key in grads:
                    grads[key] = grads[key] + grad
                else:
                    grads[key] = grad
                touched[key] = tensor
            if node.output.requires_grad:
                _accumulate(node.output, upstream)

        # Leaves (parameters, inputs) still hold their gradient in ``grads``.
        for key, grad in grads.items():
            _accumulate(touched[key], grad)


def _accumulate(tensor: Tensor, grad: np.ndarray) -> None:
    grad = np.asarray(grad, dtype=np.float64).reshape(tensor.shape)
    tensor.grad = grad.copy() if tensor.grad is None else tensor.grad + grad


def active_tape() -> Optional[Tape]:
    if not _grad_enabled.get():
        return None
    return _active_tape.get()


@contextmanager
def no_grad() -> Iterator[None]:
    """Evaluate without recording, e.g. for inference or finite differences."""
    token = _grad_enabled.set(False)
    try:
        yield
    finally:
        _grad_enabled.reset(token)


def as_tensor(value: Any) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)
