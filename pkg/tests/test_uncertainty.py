import numpy as np
import pytest
from scipy import stats

from engine import RngStream
from exceptions import UsageError
from models.network_models import DropoutVariant
from models.report_models import EvalRecord, UncertaintyVerdict
from models.run_models import AccuracySource
from services import uncertainty_service as uncertainty
from services.gradcheck_service import check_t_cdf
from services.mlp_service import (
    MlpClassifier,
    PredictiveSampleSet,
    build_mlp_spec,
    ensemble_predictive_samples,
    predict_point,
    predictive_samples,
)


def make_record(accuracy, p_value, thresholds=(0.05,), ll=-0.1, input_id=0):
    verdict = UncertaintyVerdict(
        top_class=0,
        runner_up=1,
        t_statistic=1.0,
        degrees_of_freedom=9.0,
        p_value=p_value,
        certain={f"{tau:g}": p_value < tau for tau in thresholds},
    )
    return EvalRecord(
        input_id=input_id, true_label=0, top_class=0, accuracy=accuracy, predictive_ll=ll, verdict=verdict
    )


def test_t_cdf_values():
    assert uncertainty.t_cdf(0.0, 5) == 0.5
    for df in (1, 3, 19, 120):
        for x in (-3.0, -0.4, 0.7, 2.093):
            assert uncertainty.t_cdf(x, df) == pytest.approx(stats.t.cdf(x, df), abs=1e-12)
    assert uncertainty.t_cdf(2.093, 19) == pytest.approx(0.975, abs=1e-5)


def test_t_cdf_symmetry():
    for x in np.linspace(0.1, 5.0, 12):
        assert uncertainty.t_cdf(-x, 7) == pytest.approx(1.0 - uncertainty.t_cdf(x, 7), abs=1e-14)


def test_t_cdf_against_quadrature_and_cauchy():
    for result in check_t_cdf():
        assert result.passed, f"{result.name}: {result.detail}"


def test_t_cdf_rejects_small_df():
    with pytest.raises(UsageError):
        uncertainty.t_cdf(1.0, 0.5)


def test_paired_test_matches_scipy():
    rng = RngStream(0)
    a, b = rng.normal(12) + 0.3, rng.normal(12)
    result = uncertainty.paired_t_test(a, b)
    expected = stats.ttest_rel(a, b)
    assert result.statistic == pytest.approx(expected.statistic, rel=1e-12)
    assert result.p_value == pytest.approx(expected.pvalue, rel=1e-9)
    assert result.degrees_of_freedom == 11


def test_independent_test_matches_scipy():
    rng = RngStream(1)
    a, b = rng.normal(9) + 0.5, rng.normal(14)
    result = uncertainty.independent_t_test(a, b)
    expected = stats.ttest_ind(a, b, equal_var=True)
    assert result.statistic == pytest.approx(expected.statistic, rel=1e-12)
    assert result.p_value == pytest.approx(expected.pvalue, rel=1e-9)
    assert result.degrees_of_freedom == 21


def test_paired_statistic_at_the_five_percent_boundary():
    v = RngStream(2).normal(20)
    v = (v - v.mean()) / v.std(ddof=1)
    result = uncertainty.paired_t_test(v + 2.093 / np.sqrt(20), np.zeros(20))
    assert result.statistic == pytest.approx(2.093, abs=1e-12)
    assert result.p_value == pytest.approx(2 * stats.t.sf(2.093, 19), rel=1e-9)
    assert 0.0499 < result.p_value < 0.0501


def test_degenerate_tests():
    same = uncertainty.paired_t_test([0.4, 0.4, 0.4], [0.4, 0.4, 0.4])
    assert same.degenerate and same.p_value == 1.0 and same.statistic == 0.0
    shifted = uncertainty.paired_t_test([0.75, 0.5, 1.0], [0.5, 0.25, 0.75])
    assert shifted.degenerate and shifted.p_value == 0.0 and shifted.statistic == np.inf
    flat = uncertainty.independent_t_test([0.3, 0.3], [0.3, 0.3])
    assert flat.degenerate and flat.p_value == 1.0


def test_tests_need_two_samples():
    with pytest.raises(UsageError):
        uncertainty.paired_t_test([0.1], [0.2])
    with pytest.raises(UsageError):
        uncertainty.paired_t_test([0.1, 0.2], [0.2])
    with pytest.raises(UsageError):
        uncertainty.independent_t_test([0.1, 0.2], [0.2])


def test_null_calibration():
    rng = RngStream(3)
    rejections = 0
    for trial in range(10_000):
        draws = rng.normal(40)
        rejections += uncertainty.paired_t_test(draws[:20], draws[20:]).p_value < 0.05
    assert 0.03 <= rejections / 10_000 <= 0.07


def test_certainty_verdict_uses_top_two_classes():
    rng = RngStream(4)
    base = np.column_stack([0.5 + 0.05 * rng.normal(20), 0.3 + 0.05 * rng.normal(20), np.full(20, 0.2)])
    samples = PredictiveSampleSet(probabilities=base)
    verdict = uncertainty.certainty_verdict(samples, thresholds=(0.01, 0.05))
    expected = stats.ttest_rel(base[:, 0], base[:, 1])
    assert (verdict.top_class, verdict.runner_up) == (0, 1)
    assert verdict.p_value == pytest.approx(expected.pvalue, rel=1e-9, abs=1e-300)
    assert verdict.certain == {"0.01": expected.pvalue < 0.01, "0.05": expected.pvalue < 0.05}


def test_top_two_breaks_ties_by_index():
    assert uncertainty.top_two(np.array([0.2, 0.4, 0.4])) == (1, 2)
    assert uncertainty.top_two(np.array([0.5, 0.5])) == (0, 1)


def test_verdict_rejects_single_draw():
    with pytest.raises(UsageError):
        uncertainty.certainty_verdict(PredictiveSampleSet(probabilities=np.array([[0.6, 0.4]])))
    with pytest.raises(UsageError):
        uncertainty.certainty_verdict(PredictiveSampleSet(probabilities=np.full((3, 2), 0.5)), test="welch")


def test_pavpu_from_counts():
    assert uncertainty.pavpu_from_counts(50, 10, 5, 35) == pytest.approx(0.85)
    with pytest.raises(UsageError):
        uncertainty.pavpu_from_counts(0, 0, 0, 0)


def test_pavpu_from_records():
    records = [
        make_record(1.0, 0.01),  # accurate and certain
        make_record(1.0, 0.20),  # accurate and uncertain
        make_record(0.0, 0.01),  # inaccurate and certain
        make_record(0.0, 0.20),  # inaccurate and uncertain
        make_record(1.0, 0.001),
    ]
    assert uncertainty.pavpu(records, 0.05) == pytest.approx(3 / 5)
    with pytest.raises(UsageError):
        uncertainty.pavpu([], 0.05)


def test_pavpu_matches_brute_force_counts():
    rng = RngStream(5)
    for trial in range(1000):
        n = 1 + int(rng.uniform(()) * 12)
        accurate = rng.uniform(n) < 0.6
        p_values = rng.uniform(n)
        records = [make_record(float(a), float(p)) for a, p in zip(accurate, p_values)]
        certain = p_values < 0.05
        counts = (
            np.sum(accurate & certain),
            np.sum(accurate & ~certain),
            np.sum(~accurate & certain),
            np.sum(~accurate & ~certain),
        )
        assert uncertainty.pavpu(records, 0.05) == pytest.approx(uncertainty.pavpu_from_counts(*counts))


def test_soft_accuracy_counts():
    records = [make_record(uncertainty.vqa_accuracy(2), 0.01), make_record(uncertainty.vqa_accuracy(1), 0.5)]
    assert uncertainty.vqa_accuracy(5) == 1.0
    assert uncertainty.pavpu(records, 0.05) == pytest.approx((2 / 3 + 2 / 3) / 2)


def test_predictive_log_likelihood():
    samples = PredictiveSampleSet(probabilities=np.array([[0.9, 0.1, 0.0], [0.7, 0.3, 0.0]]))
    assert uncertainty.predictive_log_likelihood(samples, 0) == pytest.approx(np.log(0.8))
    assert uncertainty.predictive_log_likelihood(samples, 2) == pytest.approx(np.log(1e-7))
    records = [make_record(1.0, 0.01, ll=v) for v in (-0.1, -0.3, -2.0)]
    assert uncertainty.test_log_likelihood(records) == pytest.approx(-0.8)


def test_ensemble_combine():
    one = PredictiveSampleSet(probabilities=np.full((4, 3), 1 / 3))
    assert uncertainty.ensemble_combine([one]) is one
    two = PredictiveSampleSet(probabilities=np.tile([0.5, 0.25, 0.25], (4, 1)))
    pooled = uncertainty.ensemble_combine([one, two])
    assert pooled.k == 8
    np.testing.assert_allclose(pooled.mean, (one.mean + two.mean) / 2)
    with pytest.raises(UsageError):
        uncertainty.ensemble_combine([one, PredictiveSampleSet(probabilities=np.full((4, 2), 0.5))])
    with pytest.raises(UsageError):
        uncertainty.ensemble_combine([])


@pytest.fixture
def small_model():
    return MlpClassifier(build_mlp_spec([4, 6, 3], DropoutVariant.CONTEXTUAL_BERNOULLI), RngStream(6))


@pytest.fixture
def small_data():
    rng = RngStream(7)
    return rng.normal((9, 4)), np.array([0, 1, 2, 0, 1, 2, 0, 1, 2])


def test_single_member_evaluation_uses_the_model_draws(small_model, small_data):
    x, y = small_data
    rng = RngStream(8)
    records, summary, pooled = uncertainty.evaluate_models([small_model], x, y, 5, (0.05,), rng)
    direct = predictive_samples(small_model, x, 5, rng.child(0, 0))
    for combined, own in zip(pooled, direct):
        np.testing.assert_array_equal(combined.probabilities, own.probabilities)
    assert summary.n_records == 9
    assert summary.ensemble_size == 1
    assert summary.k_samples == 5
    assert summary.parameter_overhead["encoder_parameters"] > 0
    assert [r.input_id for r in records] == list(range(9))


def test_point_accuracy_source(small_model, small_data):
    x, y = small_data
    records, summary, _ = uncertainty.evaluate_models(
        [small_model], x, y, 4, (0.05,), RngStream(9), accuracy_source=AccuracySource.POINT, batch_size=4
    )
    point = predict_point(small_model, x).argmax(axis=1)
    assert [r.top_class for r in records] == list(point)
    assert summary.accuracy == pytest.approx(summary.point_accuracy)
    assert summary.accuracy_source == "point"


def test_ensemble_pools_member_draws(small_data):
    x, y = small_data
    models = [MlpClassifier(build_mlp_spec([4, 6, 3], DropoutVariant.MC_BERNOULLI), RngStream(s)) for s in (1, 2)]
    _, summary, pooled = uncertainty.evaluate_models(models, x, y, 3, (0.05,), RngStream(10))
    assert summary.ensemble_size == 2
    assert all(samples.k == 6 for samples in pooled)
    members = ensemble_predictive_samples(models, x, 3, RngStream(10).child(0))
    for row, combined in enumerate(pooled):
        np.testing.assert_array_equal(combined.probabilities[:3], members[0][row].probabilities)
        np.testing.assert_array_equal(combined.probabilities[3:], members[1][row].probabilities)


def test_records_csv_accuracy_matches_summary(small_model, small_data, tmp_path):
    x, y = small_data
    records, summary, _ = uncertainty.evaluate_models([small_model], x, y, 4, (0.01, 0.05), RngStream(11))
    path = tmp_path / "records.csv"
    uncertainty.write_records_csv(records, path)
    rows = uncertainty.read_records_csv(path)
    assert list(rows[0]) == uncertainty.RECORD_COLUMNS
    assert np.mean([float(row["accuracy"]) for row in rows]) == pytest.approx(summary.accuracy)
    assert [float(row["p_value"]) for row in rows] == [r.verdict.p_value for r in records]
    assert set(summary.pavpu) == {"0.01", "0.05"}


def test_samples_csv_has_one_row_per_draw(small_model, small_data, tmp_path):
    x, _ = small_data
    sets = predictive_samples(small_model, x[:2], 3, RngStream(12))
    path = tmp_path / "samples.csv"
    uncertainty.write_samples_csv(sets, path)
    rows = uncertainty.read_records_csv(path)
    assert len(rows) == 6
    assert list(rows[0]) == ["input_id", "draw", "p0", "p1", "p2"]
