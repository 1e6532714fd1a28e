"""Tensor storage and the reverse-mode tape.

Primitives (see ``engine.ops``) record a ``Node`` on the active tape; with
no active tape they only compute values.
"""
from __future__ import annotations

import contextlib
import contextvars
from dataclasses import dataclass
from typing import Callable, Iterator, Optional, Sequence, Tuple

import numpy as np

from exceptions import NumericError, UsageError

_active_tape: contextvars.ContextVar[Optional["Tape"]] = contextvars.ContextVar(
    "active_tape", default=None
)


class Tensor:
    """Dense float64 array with an adjoint slot."""

    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data: np.ndarray = np.array(data, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        if self.data.size != 1:
            raise UsageError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" {self.name}" if self.name else ""
        return f"Tensor{label}(shape={self.shape})"


def constant(data) -> Tensor:
    return Tensor(data, requires_grad=False)


def parameter(data, name: str) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


@dataclass
class Node:
    op: str
    inputs: Tuple[Tensor, ...]
    output: Tensor
    backward: BackwardFn


class Tape:
    """Ordered record of primitive applications.

    Use as a context manager; everything evaluated inside is recorded.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self._outputs: set[int] = set()
        self._token = None

    def __enter__(self) -> "Tape":
        self._token = _active_tape.set(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        _active_tape.reset(self._token)
        self._token = None

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, node: Node) -> None:
        self.nodes.append(node)
        self._outputs.add(id(node.output))

    def backward(self, loss: Tensor) -> None:
        """Populate ``.grad`` of every tensor reachable from ``loss``.

        Grads of all tensors touched by this tape are reset first, so each
        call is self-contained.
        """
        if not self.nodes:
            raise UsageError("backward called before any forward pass was recorded")
        if loss.data.size != 1:
            raise UsageError(f"loss must be scalar, got shape {loss.shape}")
        if id(loss) not in self._outputs:
            raise UsageError("loss was not produced on this tape")

        for node in self.nodes:
            node.output.grad = None
            for tensor in node.inputs:
                tensor.grad = None
        loss.grad = np.ones_like(loss.data)

        for node in reversed(self.nodes):
            upstream = node.output.grad
            if upstream is None:
                continue
            adjoints = node.backward(upstream)
            for tensor, adjoint in zip(node.inputs, adjoints):
                if adjoint is None:
                    continue
                if not tensor.requires_grad and id(tensor) not in self._outputs:
                    continue
                if not np.all(np.isfinite(adjoint)):
                    raise NumericError(node.op, "non-finite adjoint")
                if tensor.grad is None:
                    tensor.grad = np.array(adjoint, dtype=np.float64).reshape(tensor.shape)
                else:
                    tensor.grad = tensor.grad + adjoint


def current_tape() -> Optional[Tape]:
    return _active_tape.get()


@contextlib.contextmanager
def no_tape() -> Iterator[None]:
    """Suspend recording (values only) inside an active tape."""
    token = _active_tape.set(None)
    try:
        yield
    finally:
        _active_tape.reset(token)
