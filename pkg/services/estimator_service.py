"""ELBO objectives and gradient estimators.

Every estimator returns gradients of the loss -(sum_b objective_b) / B,
ready for ``adam_update``. Encoder gradients for Bernoulli sites come from
ARM or REINFORCE surrogates; decoder and prior gradients always come from
the sampled likelihood and log-prior with masks held constant.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from engine import RngStream, Tape, Tensor, constant, no_tape, ops
from exceptions import UsageError
from models.network_models import DropoutVariant
from models.report_models import StepReport
from models.run_models import EstimatorName, KlMode
from services.dropout_service import (
    ForwardMode,
    MaskTrace,
    SiteDraw,
    antithetic_mask_from_noise,
    bernoulli_mask_from_noise,
    broadcast_mask,
    concrete_kl,
    kl_site,
    site_log_prior,
    site_log_q,
)
from services.mlp_service import MlpClassifier, log_likelihood
from services.optimizer_service import OptimizerState, adam_update

logger = logging.getLogger(__name__)


@dataclass
class GradientEstimate:
    grads: dict[str, np.ndarray]
    report: StepReport


def _as_batch(x: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    return x, np.asarray(y, dtype=np.int64).reshape(-1)


def _require_sites(model: MlpClassifier, variant: DropoutVariant, estimator: EstimatorName) -> None:
    variants = {site.variant for site in model.sites.values()}
    if variants != {variant}:
        found = ", ".join(sorted(v.value for v in variants)) or "no sites"
        raise UsageError(f"{estimator.value} needs {variant.value} sites only, model has {found}")


def site_log_ratio(model: MlpClassifier, draw: SiteDraw, z=None, trace: Optional[MaskTrace] = None) -> np.ndarray:
    """Per-row log p_eta(z) - log q(z | x) at one site, zero for sites without densities."""
    site = model.sites[draw.stage]
    counter = trace.saturation if trace is not None else None
    with no_tape():
        log_q = site_log_q(site, draw, z=z, counter=counter)
        if log_q is None:
            return np.zeros(draw.mask.shape[0])
        log_p = site_log_prior(site, draw, z=z, counter=counter)
        return log_p.data - log_q.data


def reward_r(model: MlpClassifier, log_probs: Tensor, y: np.ndarray, trace: MaskTrace) -> np.ndarray:
    """r = log p(y | x, z) + log p_eta(z) - log q(z | x), one value per row."""
    with no_tape():
        r = log_likelihood(log_probs, y).data.copy()
    for draw in trace.draws:
        r += site_log_ratio(model, draw)
    return r


def decoder_and_prior_objective(model: MlpClassifier, ll: Tensor, trace: MaskTrace) -> Tensor:
    """sum_b [log p(y | x, z) + log p_eta(z)] for Bernoulli sites; masks enter as constants."""
    objective = ops.reduce_sum(ll)
    for draw in trace.draws:
        site = model.sites[draw.stage]
        if site.variant != DropoutVariant.CONTEXTUAL_BERNOULLI:
            continue
        log_p = site_log_prior(site, draw, counter=trace.saturation)
        objective = ops.add(objective, ops.reduce_sum(log_p))
    return objective


def decoder_and_prior_grad(model: MlpClassifier, x: np.ndarray, y: np.ndarray, rng: RngStream) -> dict[str, np.ndarray]:
    """theta and eta gradients of the negative batch-mean objective, masks sampled once."""
    _require_sites(model, DropoutVariant.CONTEXTUAL_BERNOULLI, EstimatorName.ARM_SEQUENTIAL)
    x, y = _as_batch(x, y)
    tape = Tape()
    with tape:
        result = model.forward(x, ForwardMode.SAMPLE, rng.child(0))
        objective = decoder_and_prior_objective(model, log_likelihood(result.log_probs, y), result.trace)
        loss = ops.scale(objective, -1.0 / x.shape[0])
    grads, _ = _gradients(model, tape, loss)
    groups = model.parameter_groups()
    return {name: grads[name] for name in (*groups["theta"], *groups["eta"])}


def _analytic_kl_rows(model: MlpClassifier, trace: MaskTrace, batch: int) -> np.ndarray:
    rows = np.zeros(batch)
    with no_tape():
        for draw in trace.draws:
            site = model.sites[draw.stage]
            if draw.variant in (DropoutVariant.CONTEXTUAL_BERNOULLI, DropoutVariant.CONTEXTUAL_GAUSSIAN):
                rows += kl_site(site, draw.alpha).data
    return rows


def _sampled_kl_rows(model: MlpClassifier, trace: MaskTrace, batch: int) -> np.ndarray:
    rows = np.zeros(batch)
    for draw in trace.draws:
        rows -= site_log_ratio(model, draw)
    return rows


def _global_kl(model: MlpClassifier, batch: int, n_total: Optional[int]) -> float:
    scale = batch / float(n_total or batch)
    with no_tape():
        return sum(
            concrete_kl(site).item() * scale
            for _, site in model.ordered_sites
            if site.variant == DropoutVariant.CONCRETE
        )


def _gradients(model: MlpClassifier, tape: Tape, loss: Tensor) -> tuple[dict[str, np.ndarray], dict[str, float]]:
    model.zero_grad()
    tape.backward(loss)
    grads: dict[str, np.ndarray] = {}
    norms: dict[str, float] = {}
    for group, named in model.parameter_groups().items():
        total = 0.0
        for name, tensor in named.items():
            g = tensor.grad.copy() if tensor.grad is not None else np.zeros_like(tensor.data)
            grads[name] = g
            total += float(np.sum(g * g))
        if named:
            norms[group] = float(np.sqrt(total))
    return grads, norms


def _report(
    estimator: EstimatorName,
    ll: np.ndarray,
    kl: float,
    kl_kind: str,
    started: float,
    **fields,
) -> StepReport:
    ll_sum = float(np.sum(ll))
    return StepReport(
        batch_size=int(ll.shape[0]),
        estimator=estimator.value,
        elbo=ll_sum - kl,
        log_likelihood=ll_sum,
        kl=kl,
        kl_kind=kl_kind,
        wall_time=time.perf_counter() - started,
        **fields,
    )


def _pseudo_reward(
    model: MlpClassifier, draw: SiteDraw, y: np.ndarray, rng: RngStream, prefix: np.ndarray
) -> np.ndarray:
    """Reward of the continuation that swaps in z_sudo at ``draw``'s site; downstream sites resample."""
    site = model.sites[draw.stage]
    with no_tape():
        mask = broadcast_mask(constant(draw.z_sudo), draw.activation.shape, site.config.broadcast_dim, batched=True)
        x_sudo = ops.mul(constant(draw.activation.data), mask)
        continuation = model.forward_from(draw.stage + 1, x_sudo, ForwardMode.SAMPLE, rng)
        r = log_likelihood(continuation.log_probs, y).data + prefix
    r = r + site_log_ratio(model, draw, z=draw.z_sudo)
    for later in continuation.trace.draws:
        r = r + site_log_ratio(model, later)
    return r


def arm_sequential_step(model: MlpClassifier, x: np.ndarray, y: np.ndarray, rng: RngStream) -> GradientEstimate:
    """One true pass plus one pseudo continuation per site where some row has z_true != z_sudo."""
    _require_sites(model, DropoutVariant.CONTEXTUAL_BERNOULLI, EstimatorName.ARM_SEQUENTIAL)
    x, y = _as_batch(x, y)
    started = time.perf_counter()
    tape = Tape()
    with tape:
        result = model.forward(x, ForwardMode.SAMPLE, rng.child(0), with_pseudo=True)
        ll = log_likelihood(result.log_probs, y)
        objective = decoder_and_prior_objective(model, ll, result.trace)
    trace = result.trace

    ratios = [site_log_ratio(model, draw, trace=trace) for draw in trace.draws]
    r_true = ll.data + np.sum(ratios, axis=0)
    prefix = np.zeros_like(r_true)
    surrogates = []
    noop = pseudo_passes = 0
    for index, draw in enumerate(trace.draws):
        site = model.sites[draw.stage]
        differs = np.any(draw.z_true != draw.z_sudo, axis=-1)
        noop += int(np.count_nonzero(~differs))
        if differs.any():
            pseudo_passes += 1
            r_sudo = _pseudo_reward(model, draw, y, rng.child(1, draw.stage), prefix)
            gap = np.where(differs, r_true - r_sudo, 0.0)
            surrogates.append((draw, site.t * gap[:, None] * (0.5 - draw.noise)))
        prefix = prefix + ratios[index]

    with tape:
        for draw, coefficient in surrogates:
            objective = ops.add(objective, ops.reduce_sum(ops.mul(draw.alpha, constant(coefficient))))
        loss = ops.scale(objective, -1.0 / x.shape[0])
    grads, norms = _gradients(model, tape, loss)
    kl = float(np.sum(_analytic_kl_rows(model, trace, x.shape[0])))
    report = _report(
        EstimatorName.ARM_SEQUENTIAL, ll.data, kl, "analytic", started,
        grad_norms=norms, arm_noop_sites=noop, pseudo_passes=pseudo_passes,
        forward_passes=1 + pseudo_passes, saturated_probabilities=trace.saturation.count,
    )
    return GradientEstimate(grads, report)


def arm_independent_step(model: MlpClassifier, x: np.ndarray, y: np.ndarray, rng: RngStream) -> GradientEstimate:
    """One true pass and one antithetic pass reusing every site's pi."""
    _require_sites(model, DropoutVariant.CONTEXTUAL_BERNOULLI, EstimatorName.ARM_INDEPENDENT)
    x, y = _as_batch(x, y)
    started = time.perf_counter()
    tape = Tape()
    with tape:
        result = model.forward(x, ForwardMode.SAMPLE, rng.child(0))
        ll = log_likelihood(result.log_probs, y)
        objective = decoder_and_prior_objective(model, ll, result.trace)
    trace = result.trace
    r_true = reward_r(model, result.log_probs, y, trace)

    with no_tape():
        pseudo = model.forward(x, ForwardMode.ANTITHETIC, replay=trace)
    r_sudo = reward_r(model, pseudo.log_probs, y, pseudo.trace)
    gap = r_true - r_sudo

    noop = 0
    with tape:
        for draw, pseudo_draw in zip(trace.draws, pseudo.trace.draws):
            site = model.sites[draw.stage]
            noop += int(np.count_nonzero(np.all(draw.z_true == pseudo_draw.z_true, axis=-1)))
            coefficient = site.t * gap[:, None] * (0.5 - draw.noise)
            objective = ops.add(objective, ops.reduce_sum(ops.mul(draw.alpha, constant(coefficient))))
        loss = ops.scale(objective, -1.0 / x.shape[0])
    grads, norms = _gradients(model, tape, loss)
    kl = float(np.sum(_analytic_kl_rows(model, trace, x.shape[0])))
    report = _report(
        EstimatorName.ARM_INDEPENDENT, ll.data, kl, "analytic", started,
        grad_norms=norms, arm_noop_sites=noop, pseudo_passes=1, forward_passes=2,
        saturated_probabilities=trace.saturation.count,
    )
    return GradientEstimate(grads, report)


def reinforce_grad(model: MlpClassifier, x: np.ndarray, y: np.ndarray, rng: RngStream) -> GradientEstimate:
    """Score-function estimate r * grad log q(z | x) for the encoder heads."""
    _require_sites(model, DropoutVariant.CONTEXTUAL_BERNOULLI, EstimatorName.REINFORCE)
    x, y = _as_batch(x, y)
    started = time.perf_counter()
    tape = Tape()
    with tape:
        result = model.forward(x, ForwardMode.SAMPLE, rng.child(0))
        ll = log_likelihood(result.log_probs, y)
        objective = decoder_and_prior_objective(model, ll, result.trace)
    trace = result.trace
    r = reward_r(model, result.log_probs, y, trace)

    with tape:
        for draw in trace.draws:
            log_q = site_log_q(model.sites[draw.stage], draw, counter=trace.saturation)
            objective = ops.add(objective, ops.reduce_sum(ops.mul(log_q, constant(r))))
        loss = ops.scale(objective, -1.0 / x.shape[0])
    grads, norms = _gradients(model, tape, loss)
    kl = float(np.sum(_analytic_kl_rows(model, trace, x.shape[0])))
    report = _report(
        EstimatorName.REINFORCE, ll.data, kl, "analytic", started,
        grad_norms=norms, saturated_probabilities=trace.saturation.count,
    )
    return GradientEstimate(grads, report)


def reparam_gaussian_step(
    model: MlpClassifier,
    x: np.ndarray,
    y: np.ndarray,
    rng: RngStream,
    kl_mode: KlMode = KlMode.ANALYTIC,
) -> GradientEstimate:
    """Pathwise gradient of log-likelihood - KL through z = 1 + exp(t alpha / 2) * eps."""
    _require_sites(model, DropoutVariant.CONTEXTUAL_GAUSSIAN, EstimatorName.REPARAM)
    x, y = _as_batch(x, y)
    started = time.perf_counter()
    tape = Tape()
    with tape:
        result = model.forward(x, ForwardMode.SAMPLE, rng.child(0))
        ll = log_likelihood(result.log_probs, y)
        kl_rows = None
        for draw in result.trace.draws:
            site = model.sites[draw.stage]
            if kl_mode == KlMode.ANALYTIC:
                term = kl_site(site, draw.alpha)
            else:
                term = ops.sub(site_log_q(site, draw), site_log_prior(site, draw))
            kl_rows = term if kl_rows is None else ops.add(kl_rows, term)
        kl_total = ops.reduce_sum(kl_rows)
        loss = ops.scale(ops.sub(ops.reduce_sum(ll), kl_total), -1.0 / x.shape[0])
    grads, norms = _gradients(model, tape, loss)
    report = _report(
        EstimatorName.REPARAM, ll.data, float(kl_total.item()), kl_mode.value, started,
        grad_norms=norms,
    )
    return GradientEstimate(grads, report)


def backprop_step(
    model: MlpClassifier,
    x: np.ndarray,
    y: np.ndarray,
    rng: RngStream,
    n_total: Optional[int] = None,
) -> GradientEstimate:
    """Plain backpropagation for deterministic, fixed-rate, gating and Concrete sites."""
    for site in model.sites.values():
        if site.variant in (DropoutVariant.CONTEXTUAL_BERNOULLI, DropoutVariant.CONTEXTUAL_GAUSSIAN):
            raise UsageError(f"backprop cannot train {site.variant.value} sites")
    x, y = _as_batch(x, y)
    started = time.perf_counter()
    batch = x.shape[0]
    concrete_sites = [site for _, site in model.ordered_sites if site.variant == DropoutVariant.CONCRETE]
    tape = Tape()
    with tape:
        result = model.forward(x, ForwardMode.SAMPLE, rng.child(0))
        ll = log_likelihood(result.log_probs, y)
        objective = ops.reduce_sum(ll)
        kl = 0.0
        for site in concrete_sites:
            term = ops.scale(concrete_kl(site, result.trace.saturation), batch / float(n_total or batch))
            objective = ops.sub(objective, term)
            kl += term.item()
        loss = ops.scale(objective, -1.0 / batch)
    grads, norms = _gradients(model, tape, loss)
    report = _report(
        EstimatorName.BACKPROP, ll.data, kl, "global" if concrete_sites else "none", started,
        grad_norms=norms, saturated_probabilities=result.trace.saturation.count,
    )
    return GradientEstimate(grads, report)


def estimate_gradients(
    model: MlpClassifier,
    x: np.ndarray,
    y: np.ndarray,
    estimator: EstimatorName,
    rng: RngStream,
    n_total: Optional[int] = None,
    kl_mode: KlMode = KlMode.ANALYTIC,
) -> GradientEstimate:
    if estimator == EstimatorName.ARM_SEQUENTIAL:
        return arm_sequential_step(model, x, y, rng)
    if estimator == EstimatorName.ARM_INDEPENDENT:
        return arm_independent_step(model, x, y, rng)
    if estimator == EstimatorName.REINFORCE:
        return reinforce_grad(model, x, y, rng)
    if estimator == EstimatorName.REPARAM:
        return reparam_gaussian_step(model, x, y, rng, kl_mode)
    return backprop_step(model, x, y, rng, n_total)


def train_step(
    model: MlpClassifier,
    state: OptimizerState,
    x: np.ndarray,
    y: np.ndarray,
    estimator: EstimatorName,
    rng: RngStream,
    n_total: Optional[int] = None,
    kl_mode: KlMode = KlMode.ANALYTIC,
    epoch: int = 0,
) -> StepReport:
    estimate = estimate_gradients(model, x, y, estimator, rng, n_total, kl_mode)
    adam_update(state, model.trainable_parameters(), estimate.grads)
    report = estimate.report.model_copy(update={"epoch": epoch, "step": state.step})
    logger.debug("step %d elbo %.4f noop %d", state.step, report.elbo, report.arm_noop_sites)
    return report


def elbo(
    model: MlpClassifier,
    x: np.ndarray,
    y: np.ndarray,
    rng: RngStream,
    mode: KlMode = KlMode.ANALYTIC,
    n_total: Optional[int] = None,
) -> StepReport:
    """Single-sample batch ELBO: per-datum KL for contextual sites, the global KL for Concrete."""
    x, y = _as_batch(x, y)
    started = time.perf_counter()
    with no_tape():
        result = model.forward(x, ForwardMode.SAMPLE, rng)
        ll = log_likelihood(result.log_probs, y).data
    if mode == KlMode.ANALYTIC:
        kl_rows = _analytic_kl_rows(model, result.trace, x.shape[0])
    else:
        kl_rows = _sampled_kl_rows(model, result.trace, x.shape[0])
    kl = float(np.sum(kl_rows)) + _global_kl(model, x.shape[0], n_total)
    has_context = any(site.variant.is_contextual for site in model.sites.values())
    kind = mode.value if has_context else ("global" if kl else "none")
    return StepReport(
        batch_size=x.shape[0],
        estimator="evaluation",
        elbo=float(np.sum(ll)) - kl,
        log_likelihood=float(np.sum(ll)),
        kl=kl,
        kl_kind=kind,
        saturated_probabilities=result.trace.saturation.count,
        wall_time=time.perf_counter() - started,
    )


def estimate_elbo(
    model: MlpClassifier,
    x: np.ndarray,
    y: np.ndarray,
    rng: RngStream,
    draws: int = 1,
    n_total: Optional[int] = None,
    mode: KlMode = KlMode.ANALYTIC,
) -> float:
    """Monte Carlo mean of the batch ELBO over ``draws`` mask samples."""
    if draws < 1:
        raise UsageError("estimate_elbo needs at least one draw")
    values = [elbo(model, x, y, rng.child(draw), mode, n_total).elbo for draw in range(draws)]
    return float(np.mean(values))


def arm_gradient(
    alpha: np.ndarray,
    t: float,
    reward_fn: Callable[[np.ndarray], np.ndarray],
    pi: np.ndarray,
) -> np.ndarray:
    """ARM estimate of d E[reward(z)] / d alpha for independent z_c ~ Bernoulli(sigma_t(alpha_c)).

    ``pi`` may carry leading draw axes; ``reward_fn`` maps masks to one reward per draw.
    """
    alpha = np.asarray(alpha, dtype=np.float64)
    pi = np.asarray(pi, dtype=np.float64)
    z_true = bernoulli_mask_from_noise(alpha, t, pi)
    z_sudo = antithetic_mask_from_noise(alpha, t, pi)
    gap = np.asarray(reward_fn(z_true), dtype=np.float64) - np.asarray(reward_fn(z_sudo), dtype=np.float64)
    return t * gap[..., None] * (0.5 - pi)
