"""Certainty verdicts from two-sample t-tests, PAvPU, test log-likelihood and ensembles."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
from scipy import special

from engine import RngStream
from exceptions import UsageError
from models.report_models import EvalRecord, EvalSummary, UncertaintyVerdict, threshold_key
from models.run_models import AccuracySource
from services.mlp_service import MlpClassifier, PredictiveSampleSet, ensemble_predictive_samples, parameter_overhead, predict_point

logger = logging.getLogger(__name__)

DEFAULT_THRESHOLDS = (0.01, 0.05, 0.1)
LIKELIHOOD_FLOOR = 1e-7


@dataclass
class TTestResult:
    statistic: float
    degrees_of_freedom: float
    p_value: float
    degenerate: bool = False


def t_cdf(x: float, df: float) -> float:
    """Student-t CDF through the regularized incomplete beta function."""
    if df < 1:
        raise UsageError(f"degrees of freedom must be >= 1, got {df}")
    x = float(x)
    tail = 0.5 * float(special.betainc(df / 2.0, 0.5, df / (df + x * x)))
    return 1.0 - tail if x > 0 else tail


def _two_sided(statistic: float, df: float) -> float:
    # tail directly rather than 1 - cdf, which cancels for large |T|
    x = abs(statistic)
    p = float(special.betainc(df / 2.0, 0.5, df / (df + x * x)))
    return min(1.0, max(0.0, p))


def _degenerate(mean_difference: float, df: float) -> TTestResult:
    if mean_difference == 0.0:
        return TTestResult(0.0, df, 1.0, degenerate=True)
    return TTestResult(float(np.copysign(np.inf, mean_difference)), df, 0.0, degenerate=True)


def paired_t_test(a: Sequence[float], b: Sequence[float]) -> TTestResult:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise UsageError("paired test needs two equal-length sample vectors")
    n = a.shape[0]
    if n < 2:
        raise UsageError("paired test needs at least two samples")
    differences = a - b
    mean = float(differences.mean())
    s = float(differences.std(ddof=1))
    df = float(n - 1)
    if s == 0.0:
        return _degenerate(mean, df)
    statistic = mean / (s / np.sqrt(n))
    return TTestResult(float(statistic), df, _two_sided(statistic, df))


def independent_t_test(a: Sequence[float], b: Sequence[float]) -> TTestResult:
    """Pooled-variance two-sample test on squared deviations."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    n1, n2 = a.shape[0], b.shape[0]
    if n1 < 2 or n2 < 2:
        raise UsageError("independent test needs at least two samples per group")
    df = float(n1 + n2 - 2)
    pooled = (np.sum((a - a.mean()) ** 2) + np.sum((b - b.mean()) ** 2)) / df
    mean = float(a.mean() - b.mean())
    if pooled == 0.0:
        return _degenerate(mean, df)
    statistic = mean / np.sqrt(pooled * (1.0 / n1 + 1.0 / n2))
    return TTestResult(float(statistic), df, _two_sided(statistic, df))


def top_two(mean: np.ndarray) -> tuple[int, int]:
    # stable sort keeps the lower index first among ties
    order = np.argsort(-np.asarray(mean), kind="stable")
    return int(order[0]), int(order[1])


def certainty_verdict(
    samples: PredictiveSampleSet,
    thresholds: Iterable[float] = DEFAULT_THRESHOLDS,
    test: str = "paired",
) -> UncertaintyVerdict:
    if samples.k < 2:
        raise UsageError("a certainty verdict needs K >= 2 draws")
    if samples.num_classes < 2:
        raise UsageError("a certainty verdict needs at least two classes")
    top, runner_up = top_two(samples.mean)
    columns = samples.probabilities[:, top], samples.probabilities[:, runner_up]
    if test == "paired":
        result = paired_t_test(*columns)
    elif test == "independent":
        result = independent_t_test(*columns)
    else:
        raise UsageError(f"unknown test {test!r}")
    return UncertaintyVerdict(
        top_class=top,
        runner_up=runner_up,
        t_statistic=result.statistic,
        degrees_of_freedom=result.degrees_of_freedom,
        p_value=result.p_value,
        degenerate=result.degenerate,
        certain={threshold_key(tau): result.p_value < tau for tau in thresholds},
    )


def pavpu(records: Sequence[EvalRecord], threshold: float) -> float:
    """(n_ac + n_iu) / n with soft counts; binary accuracies give the usual form."""
    if not records:
        raise UsageError("pavpu needs at least one record")
    accurate = np.array([record.accuracy for record in records])
    certain = np.array([record.certainty(threshold) for record in records])
    n_ac = np.sum(accurate * certain)
    n_iu = np.sum((1.0 - accurate) * (1.0 - certain))
    return float((n_ac + n_iu) / len(records))


def pavpu_from_counts(n_ac: float, n_au: float, n_ic: float, n_iu: float) -> float:
    total = n_ac + n_au + n_ic + n_iu
    if total <= 0:
        raise UsageError("pavpu needs a positive total count")
    return (n_ac + n_iu) / total


def vqa_accuracy(humans_agreeing: int) -> float:
    """min(#humans that gave the answer / 3, 1)."""
    return min(humans_agreeing / 3.0, 1.0)


def predictive_log_likelihood(samples: PredictiveSampleSet, label: int) -> float:
    return float(np.log(max(samples.mean[label], LIKELIHOOD_FLOOR)))


def test_log_likelihood(records: Sequence[EvalRecord]) -> float:
    if not records:
        raise UsageError("test log-likelihood needs at least one record")
    return float(np.mean([record.predictive_ll for record in records]))


def ensemble_combine(sets: Sequence[PredictiveSampleSet]) -> PredictiveSampleSet:
    """Pool every member's probability rows for one input."""
    if not sets:
        raise UsageError("nothing to combine")
    classes = {s.num_classes for s in sets}
    if len(classes) != 1:
        raise UsageError(f"members disagree on class count: {sorted(classes)}")
    if len(sets) == 1:
        return sets[0]
    return PredictiveSampleSet(probabilities=np.concatenate([s.probabilities for s in sets], axis=0))


def build_record(
    input_id: int,
    label: int,
    samples: PredictiveSampleSet,
    thresholds: Sequence[float],
    point_probabilities: Optional[np.ndarray] = None,
    test: str = "paired",
) -> EvalRecord:
    verdict = certainty_verdict(samples, thresholds, test)
    predicted = verdict.top_class if point_probabilities is None else top_two(point_probabilities)[0]
    return EvalRecord(
        input_id=input_id,
        true_label=int(label),
        top_class=predicted,
        accuracy=1.0 if predicted == int(label) else 0.0,
        predictive_ll=predictive_log_likelihood(samples, int(label)),
        verdict=verdict,
    )


def summarize(
    records: Sequence[EvalRecord],
    thresholds: Sequence[float],
    accuracy_source: AccuracySource,
    k_samples: int,
    ensemble_size: int = 1,
    point_accuracy: Optional[float] = None,
    overhead: Optional[dict] = None,
) -> EvalSummary:
    if not records:
        raise UsageError("cannot summarize an empty evaluation")
    degenerate = sum(1 for record in records if record.verdict.degenerate)
    if degenerate:
        logger.warning("%d of %d t-tests were degenerate (zero variance)", degenerate, len(records))
    return EvalSummary(
        n_records=len(records),
        accuracy=float(np.mean([record.accuracy for record in records])),
        point_accuracy=point_accuracy,
        accuracy_source=accuracy_source.value,
        pavpu={threshold_key(tau): pavpu(records, tau) for tau in thresholds},
        uncertain_fraction={
            threshold_key(tau): float(np.mean([1.0 - record.certainty(tau) for record in records]))
            for tau in thresholds
        },
        test_log_likelihood=test_log_likelihood(records),
        degenerate_tests=degenerate,
        k_samples=k_samples,
        ensemble_size=ensemble_size,
        parameter_overhead=overhead or {},
    )


def evaluate_models(
    models: Sequence[MlpClassifier],
    x: np.ndarray,
    y: np.ndarray,
    k: int,
    thresholds: Sequence[float],
    rng: RngStream,
    accuracy_source: AccuracySource = AccuracySource.PREDICTIVE_MEAN,
    batch_size: int = 500,
) -> tuple[list[EvalRecord], EvalSummary, list[PredictiveSampleSet]]:
    """Records, summary and pooled sample sets for one model or an ensemble.

    Member m draws batch b from ``rng.child(b, m)``, so results do not depend
    on the number of members evaluated alongside it.
    """
    if not models:
        raise UsageError("evaluate_models needs at least one model")
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    records: list[EvalRecord] = []
    pooled: list[PredictiveSampleSet] = []
    point_hits = 0
    for batch, start in enumerate(range(0, x.shape[0], batch_size)):
        xb, yb = x[start:start + batch_size], y[start:start + batch_size]
        members = ensemble_predictive_samples(models, xb, k, rng.child(batch))
        point = np.mean([predict_point(model, xb) for model in models], axis=0)
        for row in range(xb.shape[0]):
            combined = ensemble_combine([member[row] for member in members])
            point_row = point[row] if accuracy_source == AccuracySource.POINT else None
            record = build_record(start + row, yb[row], combined, thresholds, point_row)
            records.append(record)
            pooled.append(combined)
            point_hits += int(top_two(point[row])[0] == yb[row])
    summary = summarize(
        records,
        thresholds,
        accuracy_source,
        k_samples=k,
        ensemble_size=len(models),
        point_accuracy=point_hits / len(records),
        overhead=parameter_overhead(models[0]),
    )
    return records, summary, pooled


RECORD_COLUMNS = ["input_id", "true_label", "top_class", "p_value", "accuracy", "predictive_ll"]


def write_records_csv(records: Sequence[EvalRecord], path: Path) -> None:
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(RECORD_COLUMNS)
        for record in records:
            writer.writerow([
                record.input_id,
                record.true_label,
                record.top_class,
                repr(record.verdict.p_value),
                repr(record.accuracy),
                repr(record.predictive_ll),
            ])


def read_records_csv(path: Path) -> list[dict]:
    with open(path, newline="") as handle:
        return list(csv.DictReader(handle))


def write_samples_csv(sets: Sequence[PredictiveSampleSet], path: Path) -> None:
    """One row per (input, draw) with the per-class probabilities."""
    if not sets:
        return
    classes = sets[0].num_classes
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["input_id", "draw", *[f"p{c}" for c in range(classes)]])
        for input_id, samples in enumerate(sets):
            for draw, row in enumerate(samples.probabilities):
                writer.writerow([input_id, draw, *[repr(float(p)) for p in row]])
