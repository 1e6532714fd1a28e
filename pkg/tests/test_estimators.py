import numpy as np
import pytest
from scipy import special

from engine import RngStream, constant, finite_difference_gradient, no_tape, parameter, relative_error
from exceptions import UsageError
from models.network_models import DropoutVariant
from models.run_models import EstimatorName, KlMode
from services.dropout_service import ForwardMode, concrete_kl, encoder_logits, sample_bernoulli_mask
from services.estimator_service import (
    arm_independent_step,
    arm_sequential_step,
    backprop_step,
    decoder_and_prior_grad,
    elbo,
    estimate_elbo,
    estimate_gradients,
    reinforce_grad,
    reward_r,
    train_step,
)
from services.gradcheck_service import (
    TINY_INPUT,
    TINY_LABEL,
    check_arm_scalar_identity,
    check_decoder_gradient,
    check_reparam_gradient,
    check_unbiasedness,
    tiny_network,
)
from services.mlp_service import MlpClassifier, build_mlp_spec, log_likelihood
from services.optimizer_service import OptimizerState, adam_update
from services.oracle_service import exact_elbo_grad_bruteforce


def match_prior(model):
    for _, site in model.ordered_sites:
        site.phi2_weight.data[...] = 0.0
        site.phi2_bias.data[...] = site.eta.data


def saturate(model, logit=1e4):
    for _, site in model.ordered_sites:
        site.phi2_weight.data[...] = 0.0
        site.phi2_bias.data[...] = logit


def test_reward_is_likelihood_when_posterior_equals_prior(tiny_bernoulli, batch):
    x, y = batch
    match_prior(tiny_bernoulli)
    with no_tape():
        result = tiny_bernoulli.forward(x, ForwardMode.SAMPLE, RngStream(1))
        ll = log_likelihood(result.log_probs, y).data
    np.testing.assert_allclose(reward_r(tiny_bernoulli, result.log_probs, y, result.trace), ll, atol=1e-12)


def test_reward_with_uninformative_decoder_is_log_half(tiny_bernoulli, batch):
    x, y = batch
    match_prior(tiny_bernoulli)
    out = tiny_bernoulli.layers[-1]
    out.weight.data[...] = 0.0
    out.bias.data[...] = 0.0
    with no_tape():
        result = tiny_bernoulli.forward(x, ForwardMode.SAMPLE, RngStream(2))
    np.testing.assert_allclose(reward_r(tiny_bernoulli, result.log_probs, y, result.trace), np.log(0.5), atol=1e-12)


def test_saturated_masks_make_arm_a_no_op(tiny_bernoulli, batch):
    x, y = batch
    saturate(tiny_bernoulli)
    estimate = arm_sequential_step(tiny_bernoulli, x, y, RngStream(3))
    assert estimate.report.pseudo_passes == 0
    assert estimate.report.forward_passes == 1
    assert estimate.report.arm_noop_sites == 2 * x.shape[0]
    for name in tiny_bernoulli.parameter_groups()["phi"]:
        assert not np.any(estimate.grads[name])


def test_independent_arm_costs_two_passes(tiny_bernoulli, batch):
    x, y = batch
    report = arm_independent_step(tiny_bernoulli, x, y, RngStream(4)).report
    assert report.forward_passes == 2
    assert report.pseudo_passes == 1


def test_arm_and_reinforce_share_decoder_gradients(batch):
    x, y = batch
    arm = arm_sequential_step(tiny_network(), x, y, RngStream(5))
    score = reinforce_grad(tiny_network(), x, y, RngStream(5))
    groups = tiny_network().parameter_groups()
    for name in list(groups["theta"]) + list(groups["eta"]):
        np.testing.assert_allclose(arm.grads[name], score.grads[name], atol=1e-12)


def test_step_report_is_consistent(tiny_bernoulli, batch):
    x, y = batch
    report = arm_sequential_step(tiny_bernoulli, x, y, RngStream(6)).report
    assert report.batch_size == 4
    assert report.kl >= 0
    assert report.elbo == pytest.approx(report.log_likelihood - report.kl)
    assert set(report.grad_norms) == {"theta", "phi", "eta"}


def test_decoder_gradient_matches_finite_differences():
    result = check_decoder_gradient()
    assert result.passed, result.detail


def test_reparam_gradient_matches_finite_differences():
    result = check_reparam_gradient()
    assert result.passed, result.detail


def test_dispatch_rejects_mismatched_sites(tiny_bernoulli, tiny_gaussian, batch):
    x, y = batch
    with pytest.raises(UsageError):
        estimate_gradients(tiny_bernoulli, x, y, EstimatorName.REPARAM, RngStream(0))
    with pytest.raises(UsageError):
        estimate_gradients(tiny_bernoulli, x, y, EstimatorName.BACKPROP, RngStream(0))
    with pytest.raises(UsageError):
        arm_sequential_step(tiny_gaussian, np.zeros((2, 3)), np.array([0, 1]), RngStream(0))


def test_concrete_kl_is_scaled_to_the_batch():
    model = MlpClassifier(build_mlp_spec([2, 3, 2], DropoutVariant.CONCRETE), RngStream(0))
    for _, site in model.ordered_sites:
        site.concrete_logit.data[...] = 0.0
    x = np.array([[0.5, -1.0], [1.0, 0.5], [0.0, 0.3], [-0.2, 0.1]])
    y = np.array([1, 0, 0, 1])
    report = backprop_step(model, x, y, RngStream(1), n_total=1000).report
    expected = sum(concrete_kl(site).item() for _, site in model.ordered_sites) * 4 / 1000
    assert report.kl == pytest.approx(expected)
    assert report.kl_kind == "global"
    assert "concrete" in report.grad_norms


def test_adam_zero_gradient_leaves_parameters():
    p = parameter(np.array([1.0, -2.0]), "p")
    adam_update(OptimizerState(), {"p": p}, {"p": np.zeros(2)})
    np.testing.assert_array_equal(p.data, [1.0, -2.0])


def test_adam_first_step_moves_by_learning_rate():
    p = parameter(np.array([1.0, -2.0]), "p")
    g = np.array([0.5, -3.0])
    state = OptimizerState(learning_rate=0.01)
    adam_update(state, {"p": p}, {"p": g})
    np.testing.assert_allclose(p.data, [1.0, -2.0] - 0.01 * g / (np.abs(g) + 1e-8), atol=1e-15)
    assert state.step == 1


def test_adam_rejects_missing_or_misshaped_gradients():
    p = parameter(np.zeros(3), "p")
    with pytest.raises(UsageError):
        adam_update(OptimizerState(), {"p": p}, {})
    with pytest.raises(UsageError):
        adam_update(OptimizerState(), {"p": p}, {"p": np.zeros(2)})


def test_adam_is_deterministic():
    finals = []
    for _ in range(2):
        p = parameter(np.array([0.3, 0.7]), "p")
        state = OptimizerState(learning_rate=0.05)
        for step in range(5):
            adam_update(state, {"p": p}, {"p": np.sin(p.data + step)})
        finals.append(p.data.copy())
    np.testing.assert_array_equal(finals[0], finals[1])


def single_bit_network():
    spec = build_mlp_spec([1, 2], DropoutVariant.CONTEXTUAL_BERNOULLI, (0,), t=1.0, init_rate=0.3)
    return MlpClassifier(spec, RngStream(7))


def test_enumeration_of_a_single_bit():
    model = single_bit_network()
    x, y = np.array([0.8]), 1
    site = model.sites[0]
    with no_tape():
        alpha = encoder_logits(constant(x.reshape(1, 1)), site).item()
    out = model.layers[-1]
    q1, p1 = special.expit(alpha), special.expit(site.eta.item())
    expected = 0.0
    for z, q, p in ((0.0, 1.0 - q1, 1.0 - p1), (1.0, q1, p1)):
        ll = special.log_softmax(z * x @ out.weight.data + out.bias.data)[y]
        expected += q * (ll + np.log(p) - np.log(q))
    oracle = exact_elbo_grad_bruteforce(model, x, y)
    assert oracle.configurations == 2
    assert oracle.elbo == pytest.approx(expected, abs=1e-12)


def test_enumeration_probabilities_sum_to_one(tiny_bernoulli):
    oracle = exact_elbo_grad_bruteforce(tiny_bernoulli, TINY_INPUT, TINY_LABEL)
    assert oracle.configurations == 2 ** 2 * 2 ** 3
    assert abs(oracle.branch_probability_sum - 1.0) < 1e-12


def test_enumeration_refuses_wide_sites():
    model = MlpClassifier(build_mlp_spec([17, 2], DropoutVariant.CONTEXTUAL_BERNOULLI, (0,)), RngStream(0))
    with pytest.raises(UsageError):
        exact_elbo_grad_bruteforce(model, np.zeros(17), 0)


def test_enumeration_gradient_matches_finite_differences(tiny_bernoulli):
    model = tiny_bernoulli
    oracle = exact_elbo_grad_bruteforce(model, TINY_INPUT, TINY_LABEL)
    groups = model.parameter_groups()
    named = {**groups["phi"], **groups["eta"]}

    def negative_elbo() -> float:
        return -exact_elbo_grad_bruteforce(model, TINY_INPUT, TINY_LABEL).elbo

    numeric = finite_difference_gradient(negative_elbo, list(named.values()))
    for (name, _), g in zip(named.items(), numeric):
        assert relative_error(oracle.grads[name], g) < 1e-6, name


def test_elbo_is_below_likelihood(tiny_bernoulli, batch):
    x, y = batch
    report = elbo(tiny_bernoulli, x, y, RngStream(8))
    assert report.elbo <= report.log_likelihood
    assert report.estimator == "evaluation"


def test_elbo_of_uniform_classifier():
    model = MlpClassifier(build_mlp_spec([3, 10], DropoutVariant.NONE), RngStream(0))
    model.layers[-1].weight.data[...] = 0.0
    report = elbo(model, np.ones((5, 3)), np.arange(5), RngStream(0))
    assert report.elbo == pytest.approx(5 * np.log(0.1))
    assert report.kl == 0.0
    assert report.kl_kind == "none"


def test_sampled_kl_mode_is_reported(tiny_bernoulli, batch):
    x, y = batch
    report = elbo(tiny_bernoulli, x, y, RngStream(9), mode=KlMode.SAMPLED)
    assert report.kl_kind == "sampled"


def test_score_function_has_zero_mean():
    alpha, t, n = 0.7, 1.0, 400_000
    draw = sample_bernoulli_mask(np.full(n, alpha), t, RngStream(10))
    score = t * (draw.z_true - special.expit(alpha * t))
    assert abs(score.mean()) < 3 * score.std() / np.sqrt(n)


@pytest.mark.parametrize(
    ("estimator", "variant"),
    [
        (EstimatorName.ARM_SEQUENTIAL, DropoutVariant.CONTEXTUAL_BERNOULLI),
        (EstimatorName.ARM_INDEPENDENT, DropoutVariant.CONTEXTUAL_BERNOULLI),
        (EstimatorName.REINFORCE, DropoutVariant.CONTEXTUAL_BERNOULLI),
        (EstimatorName.REPARAM, DropoutVariant.CONTEXTUAL_GAUSSIAN),
    ],
)
def test_training_improves_the_elbo(estimator, variant):
    rng = RngStream(11)
    x = np.concatenate([rng.normal((32, 2)) + 2.0, rng.normal((32, 2)) - 2.0])
    y = np.concatenate([np.zeros(32, dtype=int), np.ones(32, dtype=int)])
    model = MlpClassifier(build_mlp_spec([2, 8, 2], variant), RngStream(12))
    before = estimate_elbo(model, x, y, RngStream(13), draws=5)
    state = OptimizerState(learning_rate=0.01)
    for step in range(200):
        train_step(model, state, x, y, estimator, RngStream(14, (step,)), n_total=64)
    after = estimate_elbo(model, x, y, RngStream(13), draws=5)
    assert after > before
    assert state.step == 200


@pytest.mark.slow
def test_estimators_are_unbiased_against_enumeration():
    for result in check_unbiasedness(draws=100_000):
        if not result.name.startswith("unbiased:"):
            continue
        assert result.passed, f"{result.name}: {result.detail}"


@pytest.mark.slow
def test_both_arm_variants_have_lower_variance_than_reinforce():
    results = {result.name: result for result in check_unbiasedness(draws=100_000)}
    for name in ("arm-sequential", "arm-independent"):
        ordering = results[f"variance:{name}<reinforce"]
        assert ordering.passed, ordering.detail


@pytest.mark.slow
def test_arm_scalar_identity():
    result = check_arm_scalar_identity()
    assert result.passed, result.detail


def test_decoder_and_prior_gradient_matches_the_arm_step(batch):
    x, y = batch
    direct = decoder_and_prior_grad(tiny_network(), x, y, RngStream(15))
    arm = arm_sequential_step(tiny_network(), x, y, RngStream(15))
    assert set(direct) == set(tiny_network().parameter_groups()["theta"]) | set(tiny_network().parameter_groups()["eta"])
    for name, grad in direct.items():
        np.testing.assert_allclose(grad, arm.grads[name], atol=1e-12)
