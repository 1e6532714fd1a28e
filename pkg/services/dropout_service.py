"""Mask distributions, priors, the contextual encoder head and baseline dropouts.

Probability convention: for Bernoulli-type sites sigma_t(alpha) is the KEEP
probability (z = 1 keeps the unit). For Gaussian sites sigma_t(alpha) is the
rate inside the variance sigma/(1 - sigma) = exp(t * alpha).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Optional, Sequence, Tuple, Union

import numpy as np
from scipy import special

from engine import RngStream, Tensor, constant, ops, parameter
from exceptions import ConfigurationError, UsageError
from models.network_models import DropoutVariant, Nonlinearity, SiteConfig

PROB_FLOOR = 1e-7

ArrayOrTensor = Union[np.ndarray, Tensor]


class ForwardMode(str, Enum):
    SAMPLE = "sample"
    REPLAY_MASKS = "replay-masks"
    REPLAY_NOISE = "replay-noise"
    ANTITHETIC = "antithetic"
    EXPECTED = "expected"


@dataclass
class SaturationCounter:
    count: int = 0

    def record(self, probabilities: np.ndarray) -> None:
        clamped = int(np.sum((probabilities < PROB_FLOOR) | (probabilities > 1.0 - PROB_FLOOR)))
        self.count += clamped


@dataclass
class DropoutSite:
    config: SiteConfig
    phi1_weight: Optional[Tensor] = None
    phi1_bias: Optional[Tensor] = None
    phi2_weight: Optional[Tensor] = None
    phi2_bias: Optional[Tensor] = None
    eta: Optional[Tensor] = None
    concrete_logit: Optional[Tensor] = None

    @property
    def site_id(self) -> str:
        return self.config.site_id

    @property
    def variant(self) -> DropoutVariant:
        return self.config.variant

    @property
    def t(self) -> float:
        return self.config.t

    @property
    def has_encoder(self) -> bool:
        return self.variant.is_contextual

    @property
    def uses_barrier(self) -> bool:
        # gating is an ordinary deterministic layer trained end to end
        return self.variant in (
            DropoutVariant.CONTEXTUAL_BERNOULLI,
            DropoutVariant.CONTEXTUAL_GAUSSIAN,
        )

    def encoder_parameters(self) -> list[Tensor]:
        if not self.has_encoder:
            return []
        return [self.phi1_weight, self.phi1_bias, self.phi2_weight, self.phi2_bias]

    def named_parameters(self) -> dict[str, Tensor]:
        named = {}
        for attr in ("phi1_weight", "phi1_bias", "phi2_weight", "phi2_bias", "eta", "concrete_logit"):
            tensor = getattr(self, attr)
            if tensor is not None:
                named[f"{self.site_id}.{attr}"] = tensor
        return named


@dataclass
class SiteDraw:
    """What one site did during one forward pass."""

    site_id: str
    stage: int
    variant: DropoutVariant
    activation: Tensor
    mask: Tensor
    alpha: Optional[Tensor] = None
    noise: Optional[np.ndarray] = None
    z_sudo: Optional[np.ndarray] = None
    broadcast_shape: Tuple[int, ...] = ()

    @property
    def z_true(self) -> np.ndarray:
        return self.mask.data


@dataclass
class MaskTrace:
    draws: list[SiteDraw] = field(default_factory=list)
    saturation: SaturationCounter = field(default_factory=SaturationCounter)

    def at_stage(self, stage: int) -> Optional[SiteDraw]:
        for draw in self.draws:
            if draw.stage == stage:
                return draw
        return None

    def before_stage(self, stage: int) -> list[SiteDraw]:
        return [draw for draw in self.draws if draw.stage < stage]


def scaled_sigmoid(alpha: ArrayOrTensor, t: float) -> ArrayOrTensor:
    if t <= 0:
        raise ConfigurationError("scaled sigmoid factor t must be positive")
    if isinstance(alpha, Tensor):
        return ops.sigmoid(ops.scale(alpha, t))
    return special.expit(np.asarray(alpha, dtype=np.float64) * t)


def inverse_scaled_sigmoid(probability: float, t: float) -> float:
    return float(special.logit(probability) / t)


def initial_logit(config: SiteConfig) -> float:
    """Logit giving dropout rate ``init_rate`` when encoder weights are zero."""
    if config.variant == DropoutVariant.CONTEXTUAL_GAUSSIAN:
        return inverse_scaled_sigmoid(config.init_rate, config.t)
    return inverse_scaled_sigmoid(1.0 - config.init_rate, config.t)


def build_site(config: SiteConfig, rng: RngStream) -> DropoutSite:
    site = DropoutSite(config=config)
    width, hidden = config.logit_width, config.hidden_width
    if config.variant.is_contextual:
        # He initialization; the output bias sets the initial rate
        site.phi1_weight = parameter(rng.normal((width, hidden)) * np.sqrt(2.0 / width), "phi1_weight")
        site.phi1_bias = parameter(np.zeros(hidden), "phi1_bias")
        site.phi2_weight = parameter(rng.normal((hidden, width)) * np.sqrt(2.0 / hidden), "phi2_weight")
        site.phi2_bias = parameter(np.full(width, initial_logit(config)), "phi2_bias")
    if config.variant in (
        DropoutVariant.CONTEXTUAL_BERNOULLI,
        DropoutVariant.CONTEXTUAL_GAUSSIAN,
        DropoutVariant.CONCRETE,
    ):
        site.eta = parameter(np.array(initial_logit(config)), "eta")
    if config.variant == DropoutVariant.CONCRETE:
        site.concrete_logit = parameter(np.array(special.logit(1.0 - config.init_rate)), "concrete_logit")
    return site


def _sample_axes(U: Tensor, config: SiteConfig) -> Tuple[bool, int]:
    rank = len(config.activation_shape)
    if U.ndim == rank + 1:
        batched = True
    elif U.ndim == rank:
        batched = False
    else:
        raise ConfigurationError(f"activation of rank {U.ndim} does not fit site shape {config.activation_shape}")
    offset = 1 if batched else 0
    if not 1 <= config.broadcast_dim <= rank:
        raise ConfigurationError(f"broadcast dimension {config.broadcast_dim} out of range")
    if U.shape[offset + config.broadcast_dim - 1] != config.logit_width:
        raise ConfigurationError(
            f"activation extent {U.shape[offset + config.broadcast_dim - 1]} at dimension "
            f"{config.broadcast_dim} does not match logit width {config.logit_width}"
        )
    return batched, offset


def encoder_logits(U: Tensor, site: DropoutSite, detach: Optional[bool] = None) -> Tensor:
    """alpha = Phi2(NL(Phi1(avepool over all but dimension d of U)))."""
    if not site.has_encoder:
        raise UsageError(f"site {site.site_id} ({site.variant.value}) has no encoder head")
    config = site.config
    batched, offset = _sample_axes(U, config)
    detach = site.uses_barrier if detach is None else detach
    source = ops.stop_gradient(U) if detach else U
    keep_axis = offset + config.broadcast_dim - 1
    pool_axes = tuple(a for a in range(offset, U.ndim) if a != keep_axis)
    pooled = ops.reduce_mean(source, pool_axes) if pool_axes else source
    if not batched:
        pooled = ops.reshape(pooled, (1, config.logit_width))

    hidden = ops.add_bias(ops.matmul(pooled, site.phi1_weight), site.phi1_bias)
    if config.nonlinearity == Nonlinearity.LEAKY_RELU:
        hidden = ops.leaky_relu(hidden, config.leaky_slope)
    else:
        hidden = ops.relu(hidden)
    alpha = ops.add_bias(ops.matmul(hidden, site.phi2_weight), site.phi2_bias)
    if not batched:
        alpha = ops.reshape(alpha, (config.logit_width,))
    return alpha


@dataclass
class BernoulliDraw:
    pi: np.ndarray
    z_true: np.ndarray
    z_sudo: Optional[np.ndarray] = None


def bernoulli_mask_from_noise(alpha: np.ndarray, t: float, pi: np.ndarray) -> np.ndarray:
    return (pi < scaled_sigmoid(alpha, t)).astype(np.float64)


def antithetic_mask_from_noise(alpha: np.ndarray, t: float, pi: np.ndarray) -> np.ndarray:
    return (pi > scaled_sigmoid(-np.asarray(alpha), t)).astype(np.float64)


def sample_bernoulli_mask(alpha: np.ndarray, t: float, rng: RngStream, with_pseudo: bool = False) -> BernoulliDraw:
    alpha = np.asarray(alpha, dtype=np.float64)
    pi = rng.uniform(alpha.shape)
    draw = BernoulliDraw(pi=pi, z_true=bernoulli_mask_from_noise(alpha, t, pi))
    if with_pseudo:
        draw.z_sudo = antithetic_mask_from_noise(alpha, t, pi)
    return draw


def gaussian_mask_std(alpha: ArrayOrTensor, t: float) -> ArrayOrTensor:
    # sqrt(sigma_t / (1 - sigma_t)) == exp(t * alpha / 2)
    if isinstance(alpha, Tensor):
        return ops.exp(ops.scale(alpha, 0.5 * t))
    return np.exp(np.asarray(alpha, dtype=np.float64) * (0.5 * t))


def gaussian_mask_from_noise(alpha: ArrayOrTensor, t: float, epsilon: np.ndarray) -> Tensor:
    if not isinstance(alpha, Tensor):
        alpha = constant(alpha)
    return ops.shift(ops.mul(gaussian_mask_std(alpha, t), constant(epsilon)), 1.0)


def sample_gaussian_mask(alpha: ArrayOrTensor, t: float, rng: RngStream) -> Tuple[np.ndarray, Tensor]:
    epsilon = rng.normal(alpha.shape)
    return epsilon, gaussian_mask_from_noise(alpha, t, epsilon)


def concrete_noise(shape: Sequence[int], rng: RngStream) -> np.ndarray:
    return np.clip(rng.uniform(tuple(shape)), PROB_FLOOR, 1.0 - PROB_FLOOR)


def concrete_mask_from_noise(logit: Tensor, temperature: float, u: np.ndarray) -> Tensor:
    if temperature <= 0:
        raise ConfigurationError("concrete temperature must be positive")
    u = np.clip(u, PROB_FLOOR, 1.0 - PROB_FLOOR)
    spread = ops.broadcast(logit, u.shape, ())
    noisy = ops.add(spread, constant(np.log(u) - np.log1p(-u)))
    return ops.sigmoid(ops.scale(noisy, 1.0 / temperature))


def concrete_relaxed_mask(
    logit: Tensor, temperature: float, shape: Sequence[int], rng: RngStream
) -> Tuple[Tensor, np.ndarray]:
    """Soft keep mask in (0, 1) from a global keep logit."""
    u = concrete_noise(shape, rng)
    return concrete_mask_from_noise(logit, temperature, u), u


def expected_mask(site: DropoutSite, alpha: Optional[Tensor], unit_shape: Sequence[int]) -> Tensor:
    unit_shape = tuple(unit_shape)
    variant = site.variant
    if variant in (DropoutVariant.CONTEXTUAL_BERNOULLI, DropoutVariant.CONTEXTUAL_GATING):
        keep = scaled_sigmoid(alpha, site.t)
        if site.config.gating_dropout_rate is not None:
            keep = ops.scale(keep, 1.0 - site.config.gating_dropout_rate)
        return keep
    if variant == DropoutVariant.CONCRETE:
        return ops.broadcast(ops.sigmoid(site.concrete_logit), unit_shape, ())
    if variant == DropoutVariant.MC_BERNOULLI:
        return constant(np.full(unit_shape, 1.0 - site.config.rate))
    return constant(np.ones(unit_shape))


def broadcast_mask(z: Tensor, target_shape: Sequence[int], d: int, batched: bool = False) -> Tensor:
    """output[i_1..i_D] = z[i_d] (plus the batch axis when ``batched``)."""
    target_shape = tuple(target_shape)
    offset = 1 if batched else 0
    if not 1 <= d <= len(target_shape) - offset:
        raise ConfigurationError(f"broadcast dimension {d} out of range for {target_shape}")
    dims = (0, d) if batched else (d - 1,)
    return ops.broadcast(z, target_shape, dims)


def _clamped(probabilities: Tensor, counter: Optional[SaturationCounter]) -> Tensor:
    if counter is not None:
        counter.record(probabilities.data)
    return ops.clip(probabilities, PROB_FLOOR, 1.0 - PROB_FLOOR)


def bernoulli_log_prob(
    z: np.ndarray,
    keep: Tensor,
    drop: Optional[Tensor] = None,
    counter: Optional[SaturationCounter] = None,
) -> Tensor:
    """sum over the last axis of z ln p + (1 - z) ln(1 - p)."""
    z = np.asarray(z, dtype=np.float64)
    if drop is None:
        drop = ops.shift(ops.scale(keep, -1.0), 1.0)
    log_keep = ops.log(_clamped(keep, counter))
    log_drop = ops.log(_clamped(drop, counter))
    terms = ops.add(ops.mul(log_keep, constant(z)), ops.mul(log_drop, constant(1.0 - z)))
    return ops.reduce_sum(terms, -1)


def gaussian_log_prob(z: Tensor, log_variance: Tensor) -> Tensor:
    """sum over the last axis of log N(z; 1, exp(log_variance))."""
    deviation = ops.shift(z, -1.0)
    quadratic = ops.mul(ops.mul(deviation, deviation), ops.exp(ops.scale(log_variance, -1.0)))
    terms = ops.shift(ops.add(ops.scale(log_variance, -0.5), ops.scale(quadratic, -0.5)), -0.5 * np.log(2.0 * np.pi))
    return ops.reduce_sum(terms, -1)


def bernoulli_kl(
    q_keep: Tensor,
    p_keep: Tensor,
    q_drop: Optional[Tensor] = None,
    p_drop: Optional[Tensor] = None,
    counter: Optional[SaturationCounter] = None,
) -> Tensor:
    if q_drop is None:
        q_drop = ops.shift(ops.scale(q_keep, -1.0), 1.0)
    if p_drop is None:
        p_drop = ops.shift(ops.scale(p_keep, -1.0), 1.0)
    q_keep, q_drop = _clamped(q_keep, counter), _clamped(q_drop, counter)
    p_keep, p_drop = _clamped(p_keep, counter), _clamped(p_drop, counter)
    keep_term = ops.mul(q_keep, ops.sub(ops.log(q_keep), ops.log(p_keep)))
    drop_term = ops.mul(q_drop, ops.sub(ops.log(q_drop), ops.log(p_drop)))
    return ops.reduce_sum(ops.add(keep_term, drop_term), -1)


def gaussian_kl(log_var_q: Tensor, log_var_p: Tensor) -> Tensor:
    """KL of N(1, v_q) from N(1, v_p), summed over the last axis."""
    gap = ops.sub(log_var_q, log_var_p)
    terms = ops.scale(ops.sub(ops.shift(ops.exp(gap), -1.0), gap), 0.5)
    return ops.reduce_sum(terms, -1)


def _prior_like(site: DropoutSite, shape: Tuple[int, ...]) -> Tensor:
    return ops.broadcast(site.eta, shape, ())


def site_log_q(site: DropoutSite, draw: SiteDraw, z=None, alpha: Optional[Tensor] = None,
               counter: Optional[SaturationCounter] = None) -> Optional[Tensor]:
    """Per-row log q(z | x) of one site; None for sites without a variational density."""
    alpha = draw.alpha if alpha is None else alpha
    if site.variant == DropoutVariant.CONTEXTUAL_BERNOULLI:
        z = draw.z_true if z is None else z
        keep = scaled_sigmoid(alpha, site.t)
        drop = scaled_sigmoid(ops.scale(alpha, -1.0), site.t)
        return bernoulli_log_prob(z, keep, drop, counter)
    if site.variant == DropoutVariant.CONTEXTUAL_GAUSSIAN:
        z = draw.mask if z is None else z
        return gaussian_log_prob(z, ops.scale(alpha, site.t))
    return None


def site_log_prior(site: DropoutSite, draw: SiteDraw, z=None,
                   counter: Optional[SaturationCounter] = None) -> Optional[Tensor]:
    """Per-row log p_eta(z) of one site; None for sites without a prior."""
    shape = draw.mask.shape
    if site.variant == DropoutVariant.CONTEXTUAL_BERNOULLI:
        z = draw.z_true if z is None else z
        eta = _prior_like(site, shape)
        keep = scaled_sigmoid(eta, site.t)
        drop = scaled_sigmoid(ops.scale(eta, -1.0), site.t)
        return bernoulli_log_prob(z, keep, drop, counter)
    if site.variant == DropoutVariant.CONTEXTUAL_GAUSSIAN:
        z = draw.mask if z is None else z
        return gaussian_log_prob(z, ops.scale(_prior_like(site, shape), site.t))
    return None


def kl_site(site: DropoutSite, alpha: Tensor, counter: Optional[SaturationCounter] = None) -> Tensor:
    """Analytic per-row KL(q(z | x) || p_eta(z)) of a contextual site."""
    shape = alpha.shape
    eta = _prior_like(site, shape)
    if site.variant == DropoutVariant.CONTEXTUAL_BERNOULLI:
        return bernoulli_kl(
            scaled_sigmoid(alpha, site.t),
            scaled_sigmoid(eta, site.t),
            scaled_sigmoid(ops.scale(alpha, -1.0), site.t),
            scaled_sigmoid(ops.scale(eta, -1.0), site.t),
            counter,
        )
    if site.variant == DropoutVariant.CONTEXTUAL_GAUSSIAN:
        return gaussian_kl(ops.scale(alpha, site.t), ops.scale(eta, site.t))
    raise UsageError(f"no per-sample KL for {site.variant.value} sites")


def concrete_kl(site: DropoutSite, counter: Optional[SaturationCounter] = None) -> Tensor:
    """Global KL of the per-layer keep probability from the (fixed) prior, times the layer width."""
    width = site.config.logit_width
    keep = ops.broadcast(ops.sigmoid(site.concrete_logit), (width,), ())
    prior = ops.broadcast(constant(special.expit(site.eta.data * site.t)), (width,), ())
    return bernoulli_kl(keep, prior, counter=counter)


def contextual_gating(U: Tensor, site: DropoutSite, rng: Optional[RngStream] = None) -> Tensor:
    """U scaled by sigma_t(alpha(U)); with ``gating_dropout_rate`` and an rng, an
    MC-Bernoulli mask at that rate follows the gate."""
    batched, _ = _sample_axes(U, site.config)
    gate = scaled_sigmoid(encoder_logits(U, site), site.t)
    rate = site.config.gating_dropout_rate
    if rate is not None and rng is not None:
        gate = ops.mul(gate, constant((rng.uniform(gate.shape) < 1.0 - rate).astype(np.float64)))
    return ops.mul(U, broadcast_mask(gate, U.shape, site.config.broadcast_dim, batched))


def apply_site(
    site: DropoutSite,
    U: Tensor,
    stage: int,
    mode: ForwardMode,
    rng: Optional[RngStream] = None,
    previous: Optional[SiteDraw] = None,
    with_pseudo: bool = False,
    encoder_input: Optional[Tensor] = None,
) -> Tuple[Tensor, SiteDraw]:
    """Mask a batched activation U at one site; returns x = U * broadcast(z) and the draw.

    ``encoder_input`` replaces U as the head's input (same values, decoder
    weights held constant); without it the head reads U behind a stop-gradient.
    """
    config = site.config
    batched, _ = _sample_axes(U, config)
    if not batched:
        raise UsageError("apply_site expects a leading batch axis")
    unit_shape = (U.shape[0], config.logit_width)
    variant = site.variant
    replaying = mode in (ForwardMode.REPLAY_MASKS, ForwardMode.REPLAY_NOISE, ForwardMode.ANTITHETIC)
    if replaying and previous is None:
        raise UsageError(f"{mode.value} needs the earlier draw of site {site.site_id}")
    if replaying and previous.mask.shape != unit_shape:
        raise UsageError(
            f"replayed mask shape {previous.mask.shape} does not match {unit_shape} at site {site.site_id}"
        )
    needs_rng = variant != DropoutVariant.NONE and not (
        variant == DropoutVariant.CONTEXTUAL_GATING and config.gating_dropout_rate is None
    )
    if mode == ForwardMode.SAMPLE and rng is None and needs_rng:
        raise UsageError("sampling needs an rng stream")

    if not site.has_encoder:
        alpha = None
    elif encoder_input is not None:
        alpha = encoder_logits(encoder_input, site, detach=False)
    else:
        alpha = encoder_logits(U, site)
    noise: Optional[np.ndarray] = None
    z_sudo: Optional[np.ndarray] = None

    if mode == ForwardMode.EXPECTED:
        mask = expected_mask(site, alpha, unit_shape)
    elif mode == ForwardMode.REPLAY_MASKS:
        mask = constant(previous.mask.data)
        noise = previous.noise
    elif variant == DropoutVariant.NONE:
        mask = constant(np.ones(unit_shape))
    elif variant == DropoutVariant.CONTEXTUAL_BERNOULLI:
        if mode == ForwardMode.SAMPLE:
            draw = sample_bernoulli_mask(alpha.data, site.t, rng, with_pseudo)
            noise, z, z_sudo = draw.pi, draw.z_true, draw.z_sudo
        elif mode == ForwardMode.ANTITHETIC:
            noise = previous.noise
            z = antithetic_mask_from_noise(alpha.data, site.t, noise)
        else:
            noise = previous.noise
            z = bernoulli_mask_from_noise(alpha.data, site.t, noise)
        mask = constant(z)
    elif variant == DropoutVariant.CONTEXTUAL_GAUSSIAN:
        noise = rng.normal(unit_shape) if mode == ForwardMode.SAMPLE else previous.noise
        mask = gaussian_mask_from_noise(alpha, site.t, noise)
    elif variant == DropoutVariant.MC_BERNOULLI:
        if mode == ForwardMode.ANTITHETIC:
            mask, noise = constant(previous.mask.data), previous.noise
        else:
            noise = rng.uniform(unit_shape) if mode == ForwardMode.SAMPLE else previous.noise
            mask = constant((noise < 1.0 - config.rate).astype(np.float64))
    elif variant == DropoutVariant.MC_GAUSSIAN:
        noise = rng.normal(unit_shape) if mode == ForwardMode.SAMPLE else previous.noise
        mask = constant(1.0 + np.sqrt(config.rate / (1.0 - config.rate)) * noise)
    elif variant == DropoutVariant.CONCRETE:
        noise = concrete_noise(unit_shape, rng) if mode == ForwardMode.SAMPLE else previous.noise
        mask = concrete_mask_from_noise(site.concrete_logit, config.temperature, noise)
    elif variant == DropoutVariant.CONTEXTUAL_GATING:
        mask = scaled_sigmoid(alpha, site.t)
        if config.gating_dropout_rate is not None:
            noise = rng.uniform(unit_shape) if mode == ForwardMode.SAMPLE else previous.noise
            keep = (noise < 1.0 - config.gating_dropout_rate).astype(np.float64)
            mask = ops.mul(mask, constant(keep))
    else:
        raise ConfigurationError(f"unknown dropout variant {variant}")

    x = ops.mul(U, broadcast_mask(mask, U.shape, config.broadcast_dim, batched=True))
    draw = SiteDraw(
        site_id=site.site_id,
        stage=stage,
        variant=variant,
        activation=U,
        mask=mask,
        alpha=alpha,
        noise=noise,
        z_sudo=z_sudo,
        broadcast_shape=tuple(U.shape),
    )
    return x, draw
