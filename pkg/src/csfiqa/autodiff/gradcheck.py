"""Central finite-difference gradient checking."""

from __future__ import annotations

import math
from typing import Callable, Dict, Optional, Sequence

import numpy as np

from ..errors import GradCheckError
from .tensor import Tape, Tensor, no_grad


def relative_error(analytic: float, numeric: float, floor: float = 1e-8) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def _evaluate(f: Callable[[], Tensor], label: str, position: int) -> float:
    with no_grad():
        value = f().item()
    if not math.isfinite(value):
        raise GradCheckError(f"non-finite evaluation while perturbing {label}[{position}]")
    return value


def gradient_errors(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    h: float = 1e-5,
    *,
    floor: float = 1e-8,
    max_entries: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
) -> Dict[str, float]:
    """
    Compare the tape gradient of a scalar function with central differences.

    Args:
        f: Builds the scalar graph from ``params`` each time it is called
        params: Tensors to differentiate against
        h: Finite-difference step
        floor: Lower bound of the relative-error denominator
        max_entries: Check at most this many randomly chosen entries per tensor
        rng: Source of the entry sample (required with ``max_entries``)

    Returns:
        Maximum relative error per tensor, keyed by name (or position)

    Raises:
        GradCheckError: If ``f`` is not finite at a perturbed point
    """
    for p in params:
        p.zero_grad()
    with Tape() as tape:
        out = f()
    if not math.isfinite(out.item()):
        raise GradCheckError("non-finite evaluation at the unperturbed point")
    tape.backward(out)
    analytic = [np.zeros(p.shape) if p.grad is None else p.grad.copy() for p in params]

    errors: Dict[str, float] = {}
    for i, p in enumerate(params):
        label = p.name or f"param{i}"
        positions = np.arange(p.size)
        if max_entries is not None and p.size > max_entries:
            chooser = rng if rng is not None else np.random.default_rng(0)
            positions = np.sort(chooser.choice(p.size, size=max_entries, replace=False))
        original = p.data.copy()
        worst = 0.0
        try:
            for pos in positions:
                flat = original.reshape(-1).copy()
                flat[pos] = original.reshape(-1)[pos] + h
                p.assign(flat.reshape(p.shape))
                plus = _evaluate(f, label, int(pos))
                flat[pos] = original.reshape(-1)[pos] - h
                p.assign(flat.reshape(p.shape))
                minus = _evaluate(f, label, int(pos))
                numeric = (plus - minus) / (2.0 * h)
                worst = max(worst, relative_error(float(analytic[i].reshape(-1)[pos]), numeric, floor))
        finally:
            p.assign(original)
        errors[label] = worst
    return errors


def grad_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    h: float = 1e-5,
    *,
    floor: float = 1e-8,
    max_entries: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
) -> float:
    """Maximum relative error between analytic and central-difference gradients."""
    errors = gradient_errors(f, params, h, floor=floor, max_entries=max_entries, rng=rng)
    return max(errors.values(), default=0.0)
