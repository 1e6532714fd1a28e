"""Exact ELBO and gradients by enumerating every Bernoulli mask configuration."""
from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass

import numpy as np

from engine import Tape, constant, ops
from exceptions import UsageError
from models.network_models import DropoutVariant
from services.dropout_service import bernoulli_log_prob, broadcast_mask, encoder_logits, scaled_sigmoid
from services.mlp_service import MlpClassifier, log_likelihood

logger = logging.getLogger(__name__)

MAX_MASK_BITS = 16


@dataclass
class OracleResult:
    elbo: float
    grads: dict[str, np.ndarray]
    branch_probabilities: np.ndarray
    configurations: int

    @property
    def branch_probability_sum(self) -> float:
        return float(np.sum(self.branch_probabilities))


def _patterns(width: int) -> np.ndarray:
    return np.array(list(itertools.product((0.0, 1.0), repeat=width)))


def exact_elbo_grad_bruteforce(model: MlpClassifier, x: np.ndarray, y: int) -> OracleResult:
    """ELBO = sum_z q(z | x) r(x, z, y) for one datum, with gradients of -ELBO.

    Site l's logits are evaluated on the branch's own masked input, so the
    enumeration follows the autoregressive factorization of q. Heads read the
    activation values only: theta gets gradient from the likelihood alone.
    """
    sites = model.ordered_sites
    if not sites or any(site.variant != DropoutVariant.CONTEXTUAL_BERNOULLI for _, site in sites):
        raise UsageError("enumeration needs contextual-bernoulli sites only")
    bits = sum(site.config.logit_width for _, site in sites)
    if bits > MAX_MASK_BITS:
        raise UsageError(f"{bits} mask bits exceed the enumeration limit of {MAX_MASK_BITS}")
    x = np.asarray(x, dtype=np.float64).reshape(1, -1)

    model.zero_grad()
    tape = Tape()
    with tape:
        current = constant(x)
        log_q = constant(np.zeros(1))
        log_p = constant(np.zeros(1))
        for stage in range(model.spec.hidden_stages + 1):
            U = model.stage_activation(stage, current)
            site = model.sites.get(stage)
            if site is None:
                current = U
                continue
            patterns = _patterns(site.config.logit_width)
            rows = U.shape[0]
            index = np.repeat(np.arange(rows), patterns.shape[0])
            z = np.tile(patterns, (rows, 1))
            alpha = ops.take_rows(encoder_logits(constant(U.data), site, detach=False), index)
            log_q = ops.add(
                ops.take_rows(log_q, index),
                bernoulli_log_prob(z, scaled_sigmoid(alpha, site.t), scaled_sigmoid(ops.scale(alpha, -1.0), site.t)),
            )
            eta = ops.broadcast(site.eta, z.shape, ())
            log_p = ops.add(
                ops.take_rows(log_p, index),
                bernoulli_log_prob(z, scaled_sigmoid(eta, site.t), scaled_sigmoid(ops.scale(eta, -1.0), site.t)),
            )
            expanded = ops.take_rows(U, index)
            current = ops.mul(expanded, broadcast_mask(constant(z), expanded.shape, site.config.broadcast_dim, batched=True))
        out = model.layers[-1]
        log_probs = ops.log_softmax(ops.add_bias(ops.matmul(current, out.weight), out.bias))
        ll = log_likelihood(log_probs, np.full(log_probs.shape[0], int(y)))
        reward = ops.add(ops.sub(ll, log_q), log_p)
        probabilities = ops.exp(log_q)
        objective = ops.reduce_sum(ops.mul(probabilities, reward))
        loss = ops.scale(objective, -1.0)
    tape.backward(loss)

    grads = {
        name: tensor.grad.copy() if tensor.grad is not None else np.zeros_like(tensor.data)
        for name, tensor in model.trainable_parameters().items()
    }
    logger.debug("enumerated %d mask configurations", probabilities.shape[0])
    return OracleResult(
        elbo=float(objective.item()),
        grads=grads,
        branch_probabilities=probabilities.data.copy(),
        configurations=int(probabilities.shape[0]),
    )
