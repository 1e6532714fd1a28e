"""Run driver: datasets, training loop, evaluation and artifact files."""
from __future__ import annotations

import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

from config import settings
from engine import RngStream
from models.report_models import EvalRecord, EvalSummary, StepReport
from models.run_models import DatasetName, RunConfig
from services.checkpoint_service import load_checkpoint, save_checkpoint
from services.data_service import Dataset, add_gaussian_noise, load_mnist, minibatches, synthetic_dataset
from services.estimator_service import train_step
from services.mlp_service import MlpClassifier, build_mlp_spec, predictive_samples
from services.optimizer_service import OptimizerState
from services.uncertainty_service import evaluate_models, write_records_csv, write_samples_csv

logger = logging.getLogger(__name__)

FAILED_SENTINEL = "FAILED"
CHECKPOINT_NAME = "model.ckpt"


@dataclass
class TrainResult:
    model: MlpClassifier
    reports: list[StepReport] = field(default_factory=list)
    wall_time: float = 0.0

    @property
    def steps(self) -> int:
        return len(self.reports)


@dataclass
class EvalResult:
    records: list[EvalRecord]
    summary: EvalSummary


def output_directory(config: RunConfig, command: str) -> Path:
    if config.output_dir:
        return Path(config.output_dir)
    name = config.name or f"{command}-{config.variant.value}-seed{config.seed}"
    return Path(settings.OUTPUT_DIR) / name


def prepare_output(config: RunConfig, output_dir: Path) -> Path:
    output_dir = Path(output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)
    sentinel = output_dir / FAILED_SENTINEL
    if sentinel.exists():
        sentinel.unlink()
    (output_dir / "config.json").write_text(config.model_dump_json(indent=2) + "\n")
    return output_dir


def mark_failed(output_dir: Path, message: str) -> None:
    output_dir = Path(output_dir)
    if output_dir.exists():
        (output_dir / FAILED_SENTINEL).write_text(message + "\n")


def load_datasets(config: RunConfig) -> tuple[Dataset, Dataset]:
    """Train and test sets with the run's corruption applied (clean training data in OOD mode)."""
    if config.dataset == DatasetName.MNIST:
        train = load_mnist(config.data_dir, "train")
        test = load_mnist(config.data_dir, "test")
    else:
        data_rng = RngStream(config.seed, (11,))
        train = synthetic_dataset(config.synthetic, data_rng.child(0), config.synthetic.n_train, "synthetic-train")
        test = synthetic_dataset(config.synthetic, data_rng.child(1), config.synthetic.n_test, "synthetic-test")
    train = add_gaussian_noise(train.subset(config.train_subset), config.train_noise_variance, config.seed)
    test = add_gaussian_noise(test.subset(config.eval_subset), config.test_noise_variance, config.seed + 1)
    return train, test


def build_model(config: RunConfig, seed: Optional[int] = None) -> MlpClassifier:
    spec = build_mlp_spec(
        config.widths,
        config.variant,
        config.site_stages,
        rate=config.rate,
        init_rate=config.init_rate,
        temperature=config.temperature,
        gating_dropout_rate=config.gating_dropout_rate,
        nonlinearity=config.nonlinearity,
        gamma=config.gamma,
        t=config.t,
    )
    return MlpClassifier(spec, RngStream(config.seed if seed is None else seed, (1,)))


def train_model(
    config: RunConfig,
    train: Dataset,
    seed: Optional[int] = None,
    metrics_path: Optional[Path] = None,
) -> TrainResult:
    seed = config.seed if seed is None else seed
    model = build_model(config, seed)
    state = OptimizerState.from_settings(config.optimizer)
    root = RngStream(seed)
    result = TrainResult(model=model)
    started = time.perf_counter()
    metrics = open(metrics_path, "w") if metrics_path is not None else None
    try:
        for epoch in range(config.epochs):
            epoch_reports = []
            batches = minibatches(train, config.optimizer.batch_size, root.child(2, epoch))
            for index, (xb, yb) in enumerate(batches):
                report = train_step(
                    model, state, xb, yb, config.estimator, root.child(3, epoch, index),
                    n_total=len(train), kl_mode=config.kl_mode, epoch=epoch,
                )
                epoch_reports.append(report)
                if metrics is not None:
                    metrics.write(report.model_dump_json() + "\n")
                if config.max_steps is not None and state.step >= config.max_steps:
                    break
            result.reports.extend(epoch_reports)
            if epoch_reports:
                logger.info(
                    "epoch %d: elbo/datum %.4f loglik/datum %.4f noop sites %d pseudo passes %d",
                    epoch,
                    sum(r.elbo for r in epoch_reports) / sum(r.batch_size for r in epoch_reports),
                    sum(r.log_likelihood for r in epoch_reports) / sum(r.batch_size for r in epoch_reports),
                    sum(r.arm_noop_sites for r in epoch_reports),
                    sum(r.pseudo_passes for r in epoch_reports),
                )
            if config.max_steps is not None and state.step >= config.max_steps:
                break
    finally:
        if metrics is not None:
            metrics.close()
    result.wall_time = time.perf_counter() - started
    clamped = sum(r.saturated_probabilities for r in result.reports)
    if clamped:
        logger.warning("%d probabilities were clamped during training", clamped)
    return result


def evaluate(
    config: RunConfig,
    models: Sequence[MlpClassifier],
    test: Dataset,
    output_dir: Optional[Path] = None,
) -> EvalResult:
    records, summary, _ = evaluate_models(
        models,
        test.images,
        test.labels,
        config.k_samples,
        config.thresholds,
        RngStream(config.seed, (4,)),
        config.accuracy_source,
        config.eval_batch_size,
    )
    if output_dir is not None:
        write_records_csv(records, Path(output_dir) / "records.csv")
        (Path(output_dir) / "summary.json").write_text(summary.model_dump_json(indent=2) + "\n")
    logger.info(
        "evaluated %d inputs: accuracy %.4f, test log-likelihood %.4f",
        summary.n_records, summary.accuracy, summary.test_log_likelihood,
    )
    return EvalResult(records, summary)


def run_training(config: RunConfig, output_dir: Path) -> tuple[TrainResult, EvalResult]:
    output_dir = prepare_output(config, output_dir)
    train, test = load_datasets(config)
    trained = train_model(config, train, metrics_path=output_dir / "metrics.jsonl")
    save_checkpoint(trained.model, output_dir / CHECKPOINT_NAME)
    return trained, evaluate(config, [trained.model], test, output_dir)


def run_evaluation(config: RunConfig, checkpoints: Sequence[Path], output_dir: Path) -> EvalResult:
    output_dir = prepare_output(config, output_dir)
    _, test = load_datasets(config)
    models = [load_checkpoint(path) for path in checkpoints]
    return evaluate(config, models, test, output_dir)


def _train_member(config_json: str, member: int, output_dir: str) -> str:
    config = RunConfig.model_validate_json(config_json)
    member_dir = Path(output_dir) / f"member{member}"
    member_dir.mkdir(parents=True, exist_ok=True)
    train, _ = load_datasets(config)
    trained = train_model(config, train, seed=config.seed + member, metrics_path=member_dir / "metrics.jsonl")
    return str(save_checkpoint(trained.model, member_dir / CHECKPOINT_NAME))


def run_ensemble(config: RunConfig, output_dir: Path, members: Optional[int] = None, workers: int = 1) -> EvalResult:
    """Train ``members`` models with seeds seed + m and evaluate their pooled predictions."""
    members = members or config.ensemble_size
    config = config.model_copy(update={"ensemble_size": members})
    output_dir = prepare_output(config, output_dir)
    payload = config.model_dump_json()
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            paths = list(pool.map(_train_member, [payload] * members, range(members), [str(output_dir)] * members))
    else:
        paths = [_train_member(payload, m, str(output_dir)) for m in range(members)]
    _, test = load_datasets(config)
    return evaluate(config, [load_checkpoint(Path(p)) for p in paths], test, output_dir)


def export_samples(config: RunConfig, checkpoint: Path, output_dir: Path, count: Optional[int] = None) -> Path:
    """Per-class probability draws of the first ``count`` test inputs as CSV."""
    output_dir = prepare_output(config, output_dir)
    _, test = load_datasets(config)
    count = min(count or len(test), len(test))
    model = load_checkpoint(checkpoint)
    sets = predictive_samples(model, test.images[:count], config.k_samples, RngStream(config.seed, (5,)))
    path = output_dir / "samples.csv"
    write_samples_csv(sets, path)
    return path


def read_metrics(path: Path, skip: int = 0, limit: Optional[int] = None) -> list[dict]:
    path = Path(path)
    if not path.exists():
        return []
    with open(path) as handle:
        rows = [json.loads(line) for line in handle if line.strip()]
    end = None if limit is None else skip + limit
    return rows[skip:end]
