"""
Differentiable operations on ``Tensor``.

Every function computes its forward value with numpy and, when a tape is
active and an input requires a gradient, records a node whose backward
rule maps the upstream gradient to one gradient per input.
"""

from __future__ import annotations

import builtins
import math
from typing import Any, Optional, Sequence, Tuple

import numpy as np
from scipy.special import erf

from ..errors import DimensionError, InvalidMaskError, ZeroVectorError
from .tensor import BackwardFn, Node, Tensor, active_tape, as_tensor

_SQRT_2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def _record(op: str, inputs: Sequence[Tensor], out_data: np.ndarray, backward: BackwardFn) -> Tensor:
    tape = active_tape()
    requires = tape is not None and builtins.any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=requires)
    if requires:
        assert tape is not None
        tape.record(Node(op, tuple(inputs), out, backward))
    return out


def unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum out the axes numpy broadcasting added so ``grad`` matches ``shape``."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_check(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# Elementwise arithmetic


def add(a: Any, b: Any) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("add", a, b)

    def backward(g: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        return unbroadcast(g, a.shape), unbroadcast(g, b.shape)

    return _record("add", (a, b), a.data + b.data, backward)


def sub(a: Any, b: Any) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("sub", a, b)

    def backward(g: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        return unbroadcast(g, a.shape), unbroadcast(-g, b.shape)

    return _record("sub", (a, b), a.data - b.data, backward)


def mul(a: Any, b: Any) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("mul", a, b)
    a_data, b_data = a.data, b.data

    def backward(g: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        return unbroadcast(g * b_data, a.shape), unbroadcast(g * a_data, b.shape)

    return _record("mul", (a, b), a_data * b_data, backward)


def div(a: Any, b: Any) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("div", a, b)
    a_data, b_data = a.data, b.data

    def backward(g: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        return (
            unbroadcast(g / b_data, a.shape),
            unbroadcast(-g * a_data / (b_data * b_data), b.shape),
        )

    return _record("div", (a, b), a_data / b_data, backward)


def neg(a: Any) -> Tensor:
    a = as_tensor(a)
    return _record("neg", (a,), -a.data, lambda g: (-g,))


def exp(a: Any) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _record("exp", (a,), out, lambda g: (g * out,))


def log(a: Any) -> Tensor:
    a = as_tensor(a)
    a_data = a.data
    return _record("log", (a,), np.log(a_data), lambda g: (g / a_data,))


def abs(a: Any) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    sign = np.sign(a.data)
    return _record("abs", (a,), np.abs(a.data), lambda g: (g * sign,))


def maximum(a: Any, floor: float) -> Tensor:
    """Clamp from below by a constant; clamped entries pass no gradient."""
    a = as_tensor(a)
    passes = a.data > floor
    return _record("maximum", (a,), np.maximum(a.data, floor), lambda g: (g * passes,))


def sigmoid(a: Any) -> Tensor:
    a = as_tensor(a)
    out = 1.0 / (1.0 + np.exp(-a.data))
    return _record("sigmoid", (a,), out, lambda g: (g * out * (1.0 - out),))


def gelu(a: Any) -> Tensor:
    """Exact (erf) GELU."""
    a = as_tensor(a)
    x = a.data
    cdf = 0.5 * (1.0 + erf(x / _SQRT_2))

    def backward(g: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
        return (g * (cdf + x * pdf),)

    return _record("gelu", (a,), x * cdf, backward)


# Linear algebra and shape ops


def matmul(a: Any, b: Any) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise DimensionError(f"matmul: incompatible batch shapes {a.shape} and {b.shape}") from None
    a_data, b_data = a.data, b.data

    def backward(g: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        grad_a = g @ np.swapaxes(b_data, -1, -2)
        grad_b = np.swapaxes(a_data, -1, -2) @ g
        return unbroadcast(grad_a, a.shape), unbroadcast(grad_b, b.shape)

    return _record("matmul", (a, b), a_data @ b_data, backward)


def reshape(a: Any, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
        shape = shape[0]
    try:
        out = a.data.reshape(tuple(shape))
    except ValueError:
        raise DimensionError(f"reshape: cannot view {a.shape} as {tuple(shape)}") from None
    return _record("reshape", (a,), out, lambda g: (g.reshape(a.shape),))


def transpose(a: Any, axes: Optional[Sequence[int]] = None) -> Tensor:
    a = as_tensor(a)
    perm = tuple(range(a.ndim))[::-1] if axes is None else tuple(axes)
    inverse = tuple(np.argsort(perm))
    return _record("transpose", (a,), np.transpose(a.data, perm), lambda g: (np.transpose(g, inverse),))


def index(a: Any, key: Any) -> Tensor:
    """Basic or advanced indexing (``a[key]``)."""
    a = as_tensor(a)

    def backward(g: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        grad = np.zeros(a.shape)
        np.add.at(grad, key, g)
        return (grad,)

    return _record("index", (a,), a.data[key], backward)


def concat(tensors: Sequence[Any], axis: int = 0) -> Tensor:
    parts = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([p.data for p in parts], axis=axis)
    except ValueError:
        shapes = ", ".join(str(p.shape) for p in parts)
        raise DimensionError(f"concat: incompatible shapes {shapes} on axis {axis}") from None
    bounds = np.cumsum([p.shape[axis] for p in parts])[:-1]

    def backward(g: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        return np.split(g, bounds, axis=axis)

    return _record("concat", parts, out, backward)


def sum(a: Any, axis: Any = None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    out = np.sum(a.data, axis=axis, keepdims=keepdims)

    def backward(g: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _record("sum", (a,), out, backward)


def mean(a: Any, axis: Any = None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([a.shape[ax] for ax in axes]))
    return div(sum(a, axis=axis, keepdims=keepdims), float(count))


# Normalisations


def softmax(a: Any, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - np.max(a.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / np.sum(e, axis=axis, keepdims=True)

    def backward(g: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        return (out * (g - np.sum(g * out, axis=axis, keepdims=True)),)

    return _record("softmax", (a,), out, backward)


def masked_softmax(a: Any, keep: np.ndarray, axis: int = -1) -> Tensor:
    """
    Softmax over the kept entries of each slice; dropped entries are exactly 0.

    Args:
        a: Logits
        keep: Boolean mask broadcastable to ``a``
        axis: Normalisation axis

    Raises:
        InvalidMaskError: If some slice keeps no entry
    """
    a = as_tensor(a)
    keep = np.broadcast_to(np.asarray(keep, dtype=bool), a.shape)
    if not np.all(np.any(keep, axis=axis)):
        raise InvalidMaskError("masked_softmax: a slice has no kept entry")
    masked = np.where(keep, a.data, -np.inf)
    shifted = masked - np.max(masked, axis=axis, keepdims=True)
    e = np.where(keep, np.exp(np.where(keep, shifted, 0.0)), 0.0)
    out = e / np.sum(e, axis=axis, keepdims=True)

    def backward(g: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        return (out * (g - np.sum(g * out, axis=axis, keepdims=True)),)

    return _record("masked_softmax", (a,), out, backward)


def layernorm(a: Any, gamma: Any, beta: Any, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then scale and shift."""
    a, gamma, beta = as_tensor(a), as_tensor(gamma), as_tensor(beta)
    if gamma.shape[-1:] != a.shape[-1:] or beta.shape[-1:] != a.shape[-1:]:
        raise DimensionError(f"layernorm: features {a.shape} vs gamma {gamma.shape} / beta {beta.shape}")
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    centred = x - mu
    inv_std = 1.0 / np.sqrt((centred * centred).mean(axis=-1, keepdims=True) + eps)
    xhat = centred * inv_std
    gamma_data = gamma.data
    n = x.shape[-1]

    def backward(g: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        dxhat = g * gamma_data
        dx = (inv_std / n) * (
            n * dxhat
            - dxhat.sum(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True)
        )
        return dx, unbroadcast(g * xhat, gamma.shape), unbroadcast(g, beta.shape)

    return _record("layernorm", (a, gamma, beta), xhat * gamma_data + beta.data, backward)


def norm(a: Any, axis: int = -1, keepdims: bool = True) -> Tensor:
    """Euclidean norm; the (sub)gradient at a zero vector is taken as 0."""
    a = as_tensor(a)
    x = a.data
    out = np.sqrt(np.sum(x * x, axis=axis, keepdims=True))

    def backward(g: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        if not keepdims:
            g = np.expand_dims(g, axis)
        safe = np.where(out > 0.0, out, 1.0)
        return (np.where(out > 0.0, g * x / safe, 0.0),)

    return _record("norm", (a,), out if keepdims else np.squeeze(out, axis=axis), backward)


def l2_normalize(a: Any, axis: int = -1, eps: float = 1e-8) -> Tensor:
    """``a / max(||a||, eps)``: exact for non-degenerate vectors, finite at zero."""
    return div(a, maximum(norm(a, axis=axis, keepdims=True), eps))


def cosine_sim(u: Any, v: Any, eps: Optional[float] = None) -> Tensor:
    """
    Cosine similarity along the last axis.

    Args:
        u: Vector (or batch of vectors)
        v: Vector of the same shape
        eps: ``None`` raises on zero vectors; a float guards the norms instead

    Raises:
        ZeroVectorError: If ``eps`` is None and either input has zero norm
    """
    u, v = as_tensor(u), as_tensor(v)
    if u.shape != v.shape:
        raise DimensionError(f"cosine_sim: shapes {u.shape} and {v.shape} differ")
    if eps is None:
        if np.any(np.linalg.norm(u.data, axis=-1) == 0.0) or np.any(np.linalg.norm(v.data, axis=-1) == 0.0):
            raise ZeroVectorError("cosine_sim: zero-norm input")
        return div(sum(mul(u, v), axis=-1), mul(norm(u, keepdims=False), norm(v, keepdims=False)))
    return sum(mul(l2_normalize(u, eps=eps), l2_normalize(v, eps=eps)), axis=-1)


def l1_loss(pred: Any, target: Any) -> Tensor:
    """Mean absolute error over all entries."""
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape:
        raise DimensionError(f"l1_loss: shapes {pred.shape} and {target.shape} differ")
    return mean(abs(sub(pred, target)))
