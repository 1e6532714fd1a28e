"""Adam with bias-corrected moments."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from engine import Tensor
from exceptions import UsageError
from models.run_models import OptimizerSettings


@dataclass
class OptimizerState:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0
    first: dict[str, np.ndarray] = field(default_factory=dict)
    second: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def from_settings(cls, settings: OptimizerSettings) -> "OptimizerState":
        return cls(
            learning_rate=settings.learning_rate,
            beta1=settings.beta1,
            beta2=settings.beta2,
            epsilon=settings.epsilon,
        )


def adam_update(state: OptimizerState, params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray]) -> None:
    """Update ``params`` in place from gradients of the loss to minimize."""
    for name, tensor in params.items():
        if name not in grads:
            raise UsageError(f"no gradient for parameter {name}")
        if grads[name].shape != tensor.shape:
            raise UsageError(f"gradient shape {grads[name].shape} does not match {name} {tensor.shape}")

    state.step += 1
    correction1 = 1.0 - state.beta1 ** state.step
    correction2 = 1.0 - state.beta2 ** state.step
    for name, tensor in params.items():
        g = grads[name]
        m = state.first.get(name)
        v = state.second.get(name)
        if m is None:
            m = np.zeros_like(tensor.data)
            v = np.zeros_like(tensor.data)
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * g * g
        state.first[name] = m
        state.second[name] = v
        tensor.data -= state.learning_rate * (m / correction1) / (np.sqrt(v / correction2) + state.epsilon)
