import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import special

from engine import RngStream, Tape, constant, ops, parameter
from exceptions import ConfigurationError, UsageError
from models.network_models import DropoutVariant, MlpSpec, SiteConfig
from services.dropout_service import (
    ForwardMode,
    SaturationCounter,
    SiteDraw,
    antithetic_mask_from_noise,
    apply_site,
    bernoulli_kl,
    bernoulli_log_prob,
    bernoulli_mask_from_noise,
    broadcast_mask,
    build_site,
    concrete_kl,
    concrete_relaxed_mask,
    contextual_gating,
    encoder_logits,
    gaussian_kl,
    gaussian_mask_std,
    initial_logit,
    inverse_scaled_sigmoid,
    kl_site,
    sample_bernoulli_mask,
    sample_gaussian_mask,
    scaled_sigmoid,
    site_log_prior,
)
from services.mlp_service import MlpClassifier, build_mlp_spec, parameter_overhead


def make_site(variant=DropoutVariant.CONTEXTUAL_BERNOULLI, shape=(6,), d=1, seed=0, **options):
    config = SiteConfig(site_id="s", variant=variant, activation_shape=list(shape), broadcast_dim=d, **options)
    return build_site(config, RngStream(seed))


def test_scaled_sigmoid_and_inverse():
    assert scaled_sigmoid(np.array(0.0), 0.01) == 0.5
    p = scaled_sigmoid(np.array(inverse_scaled_sigmoid(0.8, 0.01)), 0.01)
    assert abs(p - 0.8) < 1e-12
    with pytest.raises(ConfigurationError):
        scaled_sigmoid(np.array(1.0), 0.0)


def test_initial_logit_gives_initial_rate():
    bernoulli = SiteConfig(site_id="a", variant=DropoutVariant.CONTEXTUAL_BERNOULLI, activation_shape=[4], init_rate=0.2)
    gaussian = SiteConfig(site_id="b", variant=DropoutVariant.CONTEXTUAL_GAUSSIAN, activation_shape=[4], init_rate=0.2)
    # keep probability 0.8 for Bernoulli, rate 0.2 inside the Gaussian variance
    assert abs(special.expit(initial_logit(bernoulli) * 0.01) - 0.8) < 1e-12
    assert abs(special.expit(initial_logit(gaussian) * 0.01) - 0.2) < 1e-12


def test_fc_encoder_logits_shape_and_hidden_width():
    site = make_site(shape=(784,))
    assert site.config.hidden_width == 79
    assert site.phi1_weight.shape == (784, 79)
    alpha = encoder_logits(constant(np.ones((3, 784))), site)
    assert alpha.shape == (3, 784)


def test_conv_shaped_activation_pools_spatial_axes():
    site = make_site(shape=(5, 5, 8), d=3)
    U = RngStream(1).normal((2, 5, 5, 8))
    alpha = encoder_logits(constant(U), site)
    assert alpha.shape == (2, 8)
    single = encoder_logits(constant(U[0]), site)
    np.testing.assert_allclose(single.data, alpha.data[0])
    x, draw = apply_site(site, constant(U), 0, ForwardMode.SAMPLE, RngStream(2))
    assert draw.mask.shape == (2, 8)
    # each channel is kept or dropped across every spatial position
    for b in range(2):
        for c in range(8):
            expected = U[b, :, :, c] * draw.mask.data[b, c]
            np.testing.assert_array_equal(x.data[b, :, :, c], expected)


def test_attention_shaped_activation_broadcasts_per_head():
    site = make_site(shape=(8, 14, 14), d=1)
    U = RngStream(3).uniform((2, 8, 14, 14))
    alpha = encoder_logits(constant(U), site)
    assert alpha.shape == (2, 8)
    mask = broadcast_mask(constant(np.arange(16.0).reshape(2, 8)), U.shape, 1, batched=True)
    assert mask.shape == U.shape
    assert mask.data[1, 3, 7, 2] == 11.0


def test_encoder_rejects_wrong_extent():
    site = make_site(shape=(6,))
    with pytest.raises(ConfigurationError):
        encoder_logits(constant(np.ones((2, 5))), site)


def test_true_and_pseudo_masks():
    alpha = np.array([0.0, 500.0, -500.0])
    pi = np.array([0.3, 0.5, 0.5])
    np.testing.assert_array_equal(bernoulli_mask_from_noise(alpha, 0.01, pi), [1.0, 1.0, 0.0])
    np.testing.assert_array_equal(antithetic_mask_from_noise(alpha, 0.01, pi), [0.0, 1.0, 0.0])


def test_saturated_logits_make_pseudo_equal_true():
    draw = sample_bernoulli_mask(np.full((50, 4), 1e5), 0.01, RngStream(0), with_pseudo=True)
    np.testing.assert_array_equal(draw.z_true, draw.z_sudo)


def test_bernoulli_keep_frequency():
    draw = sample_bernoulli_mask(np.full(100_000, inverse_scaled_sigmoid(0.7, 0.01)), 0.01, RngStream(5))
    assert abs(draw.z_true.mean() - 0.7) < 4 * np.sqrt(0.21 / 100_000)


@settings(max_examples=40, deadline=None)
@given(st.floats(-500, 500), st.floats(0.001, 0.05))
def test_gaussian_std_identity(alpha, t):
    expected = np.sqrt(special.expit(alpha * t) / special.expit(-alpha * t))
    assert abs(gaussian_mask_std(np.array(alpha), t) - expected) <= 1e-9 * max(1.0, expected)


@settings(max_examples=50, deadline=None)
@given(
    st.lists(st.floats(0.01, 0.99), min_size=1, max_size=5),
    st.lists(st.floats(0.01, 0.99), min_size=1, max_size=5),
)
def test_bernoulli_kl_is_non_negative(q, p):
    n = min(len(q), len(p))
    kl = bernoulli_kl(constant(np.array(q[:n])), constant(np.array(p[:n])))
    assert kl.item() >= -1e-12


def test_kl_vanishes_when_posterior_equals_prior():
    q = constant(np.array([0.2, 0.6, 0.9]))
    assert abs(bernoulli_kl(q, q).item()) < 1e-12
    v = constant(np.array([0.3, -1.0]))
    assert abs(gaussian_kl(v, v).item()) < 1e-12


def test_kl_site_zero_for_zero_head_and_matching_prior():
    site = make_site()
    site.phi2_weight.data[...] = 0.0
    site.phi2_bias.data[...] = site.eta.data
    alpha = encoder_logits(constant(np.ones((2, 6))), site)
    np.testing.assert_allclose(kl_site(site, alpha).data, 0.0, atol=1e-12)


def test_prior_gradient_closed_form():
    site = make_site(shape=(5,))
    site.eta.data[...] = 40.0
    z = np.array([[1.0, 0.0, 1.0, 1.0, 0.0]])
    draw = SiteDraw(site_id="s", stage=0, variant=site.variant, activation=constant(np.ones((1, 5))), mask=constant(z))
    with Tape() as tape:
        loss = ops.reduce_sum(site_log_prior(site, draw))
    tape.backward(loss)
    t = site.t
    expected = t * (3 - 5 * special.expit(40.0 * t))
    assert abs(site.eta.grad - expected) < 1e-12


def test_log_prob_clamps_and_counts_saturation():
    counter = SaturationCounter()
    keep = constant(np.array([[1.0, 0.5]]))
    value = bernoulli_log_prob(np.array([[0.0, 1.0]]), keep, counter=counter)
    assert np.isfinite(value.item())
    assert counter.count >= 1


def test_concrete_mask_is_soft_and_kl_positive():
    site = make_site(DropoutVariant.CONCRETE)
    mask, _ = concrete_relaxed_mask(site.concrete_logit, 1.0, (4, 6), RngStream(0))
    assert np.all((mask.data > 0) & (mask.data < 1))
    assert site.concrete_logit.item() == pytest.approx(special.logit(0.8))
    assert concrete_kl(site).item() == pytest.approx(0.0, abs=1e-9)
    site.concrete_logit.data[...] = 0.0
    assert concrete_kl(site).item() > 0


def test_contextual_gating_scales_by_keep_probability():
    site = make_site(DropoutVariant.CONTEXTUAL_GATING)
    U = constant(RngStream(4).normal((3, 6)))
    gate = scaled_sigmoid(encoder_logits(U, site), site.t)
    np.testing.assert_allclose(contextual_gating(U, site).data, U.data * gate.data)


def test_gating_receives_end_to_end_gradient():
    site = make_site(DropoutVariant.CONTEXTUAL_GATING)
    U = parameter(RngStream(4).normal((3, 6)), "U")
    with Tape() as tape:
        loss = ops.reduce_sum(contextual_gating(U, site))
    tape.backward(loss)
    assert site.phi2_bias.grad is not None and np.any(site.phi2_bias.grad != 0)


def test_replay_without_trace_is_usage_error():
    site = make_site()
    with pytest.raises(UsageError):
        apply_site(site, constant(np.ones((2, 6))), 0, ForwardMode.REPLAY_MASKS)


def test_replay_shape_mismatch_is_usage_error():
    site = make_site()
    _, draw = apply_site(site, constant(np.ones((2, 6))), 0, ForwardMode.SAMPLE, RngStream(0))
    with pytest.raises(UsageError):
        apply_site(site, constant(np.ones((3, 6))), 0, ForwardMode.REPLAY_MASKS, previous=draw)


def test_mc_sites_need_a_rate():
    with pytest.raises(ValueError):
        SiteConfig(site_id="m", variant=DropoutVariant.MC_BERNOULLI, activation_shape=[4])
    with pytest.raises(ValueError):
        SiteConfig(site_id="c", variant=DropoutVariant.CONTEXTUAL_BERNOULLI, activation_shape=[4], rate=0.3)


def test_parameter_overhead_counts_encoder_heads():
    model = MlpClassifier(build_mlp_spec([784, 300, 100, 10], DropoutVariant.CONTEXTUAL_BERNOULLI), RngStream(0))
    overhead = parameter_overhead(model)
    decoder = 784 * 300 + 300 + 300 * 100 + 100 + 100 * 10 + 10
    heads = sum(2 * c * h + h + c for c, h in ((784, 79), (300, 30), (100, 10)))
    assert overhead["decoder_parameters"] == decoder
    assert overhead["encoder_parameters"] == heads
    assert overhead["overhead_ratio"] == pytest.approx(heads / decoder)


def test_mlp_spec_rejects_mismatched_site():
    site = SiteConfig(site_id="s", variant=DropoutVariant.CONTEXTUAL_BERNOULLI, activation_shape=[5])
    with pytest.raises(ValueError):
        MlpSpec(widths=[4, 3, 2], sites=[site], site_stages=[0])


def test_gaussian_masks_center_on_one():
    alpha = np.full(200_000, inverse_scaled_sigmoid(0.3, 0.01))
    epsilon, mask = sample_gaussian_mask(alpha, 0.01, RngStream(6))
    assert epsilon.shape == alpha.shape
    std = np.sqrt(0.3 / 0.7)
    assert abs(mask.data.mean() - 1.0) < 4 * std / np.sqrt(alpha.size)
    assert abs(mask.data.std() - std) < 0.01
