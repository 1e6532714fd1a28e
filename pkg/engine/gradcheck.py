from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from engine.tape import Tensor
from exceptions import UsageError


def finite_difference_gradient(
    f: Callable[[], float],
    params: Sequence[Tensor],
    h: float = 1e-5,
    scale_by_magnitude: bool = True,
) -> list[np.ndarray]:
    """Central differences of ``f`` w.r.t. every coordinate of ``params``.

    ``f`` reads the parameters in place and must be deterministic (replay
    any random draws). The step is ``h * max(1, |p|)`` when scaled.
    """
    if h <= 0:
        raise UsageError("finite difference step must be positive")
    gradients = []
    for param in params:
        flat = param.data.reshape(-1)
        grad = np.zeros_like(flat)
        for i in range(flat.size):
            original = flat[i]
            step = h * max(1.0, abs(original)) if scale_by_magnitude else h
            flat[i] = original + step
            upper = f()
            flat[i] = original - step
            lower = f()
            flat[i] = original
            grad[i] = (upper - lower) / (2.0 * step)
        gradients.append(grad.reshape(param.shape))
    return gradients


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denominator = max(np.max(np.abs(a)), np.max(np.abs(b)), floor)
    return float(np.max(np.abs(a - b)) / denominator)
