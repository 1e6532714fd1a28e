"""Primitive set with adjoint rules.

Broadcasting happens only in ``add_bias`` and ``broadcast``; every other
binary primitive requires equal shapes.
"""
from __future__ import annotations

from typing import Optional, Sequence, Tuple, Union

import numpy as np
from scipy import special

from engine.tape import BackwardFn, Node, Tensor, current_tape
from exceptions import ConfigurationError, NumericError

Axes = Optional[Union[int, Sequence[int]]]


def _emit(op: str, inputs: Tuple[Tensor, ...], value: np.ndarray, backward: BackwardFn) -> Tensor:
    for tensor in inputs:
        if not np.all(np.isfinite(tensor.data)):
            raise NumericError(op, "non-finite input")
    if not np.all(np.isfinite(value)):
        raise NumericError(op, "non-finite output")
    out = Tensor(value)
    tape = current_tape()
    if tape is not None:
        tape.record(Node(op, inputs, out, backward))
    return out


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ConfigurationError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _normalize_axes(axes: Axes, ndim: int) -> Tuple[int, ...]:
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    normalized = []
    for axis in axes:
        if not -ndim <= axis < ndim:
            raise ConfigurationError(f"axis {axis} out of range for rank {ndim}")
        normalized.append(axis % ndim)
    return tuple(sorted(set(normalized)))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ConfigurationError(f"matmul: cannot multiply {a.shape} by {b.shape}")

    def backward(g):
        return g @ b.data.T, a.data.T @ g

    return _emit("matmul", (a, b), a.data @ b.data, backward)


def add_bias(x: Tensor, bias: Tensor) -> Tensor:
    if bias.ndim != 1 or x.ndim < 1 or x.shape[-1] != bias.shape[0]:
        raise ConfigurationError(f"add_bias: bias {bias.shape} does not fit {x.shape}")

    def backward(g):
        return g, g.reshape(-1, bias.shape[0]).sum(axis=0)

    return _emit("add_bias", (x, bias), x.data + bias.data, backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return _emit("add", (a, b), a.data + b.data, lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    return _emit("sub", (a, b), a.data - b.data, lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mul", a, b)

    def backward(g):
        return g * b.data, g * a.data

    return _emit("mul", (a, b), a.data * b.data, backward)


def scale(x: Tensor, factor: float) -> Tensor:
    factor = float(factor)
    return _emit("scale", (x,), x.data * factor, lambda g: (g * factor,))


def shift(x: Tensor, offset: float) -> Tensor:
    offset = float(offset)
    return _emit("shift", (x,), x.data + offset, lambda g: (g,))


def leaky_relu(x: Tensor, slope: float) -> Tensor:
    # derivative at exactly 0 is the negative-side slope
    positive = x.data > 0

    def backward(g):
        return (g * np.where(positive, 1.0, slope),)

    return _emit("leaky_relu", (x,), np.where(positive, x.data, slope * x.data), backward)


def relu(x: Tensor) -> Tensor:
    positive = x.data > 0

    def backward(g):
        return (g * positive,)

    return _emit("relu", (x,), np.where(positive, x.data, 0.0), backward)


def sigmoid(x: Tensor) -> Tensor:
    value = special.expit(x.data)

    def backward(g):
        return (g * value * (1.0 - value),)

    return _emit("sigmoid", (x,), value, backward)


def exp(x: Tensor) -> Tensor:
    value = np.exp(x.data)
    return _emit("exp", (x,), value, lambda g: (g * value,))


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0):
        raise NumericError("log", "non-positive input")
    return _emit("log", (x,), np.log(x.data), lambda g: (g / x.data,))


def sqrt(x: Tensor) -> Tensor:
    if np.any(x.data < 0):
        raise NumericError("sqrt", "negative input")
    value = np.sqrt(x.data)

    def backward(g):
        return (g / (2.0 * value),)

    return _emit("sqrt", (x,), value, backward)


def clip(x: Tensor, low: float, high: float) -> Tensor:
    inside = (x.data >= low) & (x.data <= high)
    return _emit("clip", (x,), np.clip(x.data, low, high), lambda g: (g * inside,))


def log_softmax(x: Tensor) -> Tensor:
    # scipy subtracts the row max before exponentiating
    value = special.log_softmax(x.data, axis=-1)
    probs = np.exp(value)

    def backward(g):
        return (g - probs * g.sum(axis=-1, keepdims=True),)

    return _emit("log_softmax", (x,), value, backward)


def reduce_sum(x: Tensor, axes: Axes = None) -> Tensor:
    axes = _normalize_axes(axes, x.ndim)

    def backward(g):
        expanded = np.expand_dims(g, axes) if axes else g
        return (np.broadcast_to(expanded, x.shape),)

    return _emit("reduce_sum", (x,), x.data.sum(axis=axes), backward)


def reduce_mean(x: Tensor, axes: Axes = None) -> Tensor:
    axes = _normalize_axes(axes, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1

    def backward(g):
        expanded = np.expand_dims(g, axes) if axes else g
        return (np.broadcast_to(expanded, x.shape) / count,)

    return _emit("reduce_mean", (x,), x.data.mean(axis=axes), backward)


def broadcast(x: Tensor, shape: Sequence[int], dims: Sequence[int]) -> Tensor:
    """Place the axes of ``x`` at target axes ``dims`` and repeat along the rest."""
    shape = tuple(int(s) for s in shape)
    dims = tuple(int(d) for d in dims)
    if len(dims) != x.ndim or any(b <= a for a, b in zip(dims, dims[1:])):
        raise ConfigurationError(f"broadcast: dims {dims} invalid for rank {x.ndim}")
    if any(not 0 <= d < len(shape) for d in dims):
        raise ConfigurationError(f"broadcast: dims {dims} outside target rank {len(shape)}")
    for axis, target in enumerate(dims):
        if x.shape[axis] != shape[target]:
            raise ConfigurationError(
                f"broadcast: extent {x.shape[axis]} does not match {shape[target]} at axis {target}"
            )
    placed = [1] * len(shape)
    for axis, target in enumerate(dims):
        placed[target] = x.shape[axis]
    repeated = tuple(i for i in range(len(shape)) if i not in dims)

    def backward(g):
        return (g.sum(axis=repeated).reshape(x.shape),)

    value = np.broadcast_to(x.data.reshape(placed), shape).copy()
    return _emit("broadcast", (x,), value, backward)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    value = x.data.reshape(tuple(shape))
    return _emit("reshape", (x,), value, lambda g: (g.reshape(x.shape),))


def take_rows(x: Tensor, index: np.ndarray) -> Tensor:
    index = np.asarray(index, dtype=np.int64)

    def backward(g):
        out = np.zeros_like(x.data)
        np.add.at(out, index, g)
        return (out,)

    return _emit("take_rows", (x,), x.data[index], backward)


def stop_gradient(x: Tensor) -> Tensor:
    """Barrier: the output carries the value, the input receives nothing."""
    return _emit("stop_gradient", (x,), x.data.copy(), lambda g: (None,))
