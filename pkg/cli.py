#!/usr/bin/env python3
"""Command-line entry point: train, eval, uncertainty, ensemble, gradcheck, export-samples, serve."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Callable, Optional, Sequence

from pydantic import ValidationError

from config import settings
from exceptions import ConfigurationError, DropoutToolkitError, UsageError
from models.network_models import DropoutVariant
from models.run_models import EstimatorName, RunConfig
from services.training_service import CHECKPOINT_NAME, mark_failed, output_directory

logger = logging.getLogger("cli")


class ToolkitArgumentParser(argparse.ArgumentParser):
    def error(self, message: str):
        raise UsageError(message)


def _thresholds(value: str) -> list[float]:
    try:
        return [float(part) for part in value.split(",") if part.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid threshold list {value!r}")


def _run_options(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, help="JSON RunConfig file")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--variant", choices=[v.value for v in DropoutVariant])
    parser.add_argument("--estimator", choices=[e.value for e in EstimatorName])
    parser.add_argument("--dataset", choices=["mnist", "synthetic"])
    parser.add_argument("--data-dir")
    parser.add_argument("--noise-var", type=float)
    parser.add_argument("--ood", action="store_true", default=None)
    parser.add_argument("--epochs", type=int)
    parser.add_argument("--max-steps", type=int)
    parser.add_argument("--train-subset", type=int)
    parser.add_argument("--eval-subset", type=int)
    parser.add_argument("--batch-size", type=int)
    parser.add_argument("--lr", type=float)
    parser.add_argument("--k", type=int, dest="k_samples")
    parser.add_argument("--threshold", type=_thresholds, dest="thresholds")
    parser.add_argument("--out", dest="output_dir")
    parser.add_argument("--name")
    parser.add_argument("--no-registry", action="store_true", help="do not record the run in the registry")


def build_parser() -> argparse.ArgumentParser:
    parser = ToolkitArgumentParser(prog="contextual-dropout", description=__doc__)
    commands = parser.add_subparsers(dest="command", required=True)

    _run_options(commands.add_parser("train", help="train one model and evaluate it"))
    for name in ("eval", "uncertainty"):
        sub = commands.add_parser(name, help="evaluate stored checkpoints")
        _run_options(sub)
        sub.add_argument("--checkpoint", type=Path, action="append", help="repeat to pool an ensemble")
    ensemble = commands.add_parser("ensemble", help="train M seeds and pool their predictions")
    _run_options(ensemble)
    ensemble.add_argument("--members", type=int)
    ensemble.add_argument("--workers", type=int, default=1)
    export = commands.add_parser("export-samples", help="dump per-class probability draws")
    _run_options(export)
    export.add_argument("--checkpoint", type=Path)
    export.add_argument("--count", type=int, default=100)
    gradcheck = commands.add_parser("gradcheck", help="run the gradient and statistics oracles")
    gradcheck.add_argument("--quick", action="store_true")
    gradcheck.add_argument("--seed", type=int, default=0)
    serve = commands.add_parser("serve", help="start the results API")
    serve.add_argument("--host", default=settings.HOST)
    serve.add_argument("--port", type=int, default=settings.PORT)
    serve.add_argument("--reload", action="store_true")
    return parser


OVERRIDES = (
    "seed", "variant", "estimator", "dataset", "data_dir", "noise_variance", "ood", "epochs",
    "max_steps", "train_subset", "eval_subset", "k_samples", "thresholds", "output_dir", "name",
)


def load_config(args: argparse.Namespace) -> RunConfig:
    """Config file, then flag overrides, validated as one RunConfig."""
    data: dict = {}
    if args.config is not None:
        try:
            data = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigurationError(f"cannot read config {args.config}: {e}")
    args.noise_variance = args.noise_var
    for field in OVERRIDES:
        value = getattr(args, field, None)
        if value is not None:
            data[field] = value
    if args.variant is not None and args.estimator is None and "estimator" in data:
        # a new variant from the command line picks its own default estimator
        data.pop("estimator")
    optimizer = dict(data.get("optimizer", {}))
    if args.batch_size is not None:
        optimizer["batch_size"] = args.batch_size
    if args.lr is not None:
        optimizer["learning_rate"] = args.lr
    if optimizer:
        data["optimizer"] = optimizer
    try:
        return RunConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigurationError(str(e))


class RegistryHandle:
    """Optional run registration; all calls are no-ops when disabled."""

    def __init__(self, enabled: bool):
        self.db = None
        self.run_id: Optional[int] = None
        if enabled:
            from database.database import SessionLocal, init_db

            init_db()
            self.db = SessionLocal()

    def register(self, config: RunConfig, command: str, output_dir: Path) -> None:
        if self.db is not None:
            from services.registry_service import register_run

            self.run_id = register_run(self.db, config, command, str(output_dir)).id

    def complete(self, **fields) -> None:
        if self.db is not None and self.run_id is not None:
            from services.registry_service import complete_run

            complete_run(self.db, self.run_id, **fields)

    def fail(self, message: str) -> None:
        if self.db is not None and self.run_id is not None:
            from services.registry_service import fail_run

            fail_run(self.db, self.run_id, message)

    def close(self) -> None:
        if self.db is not None:
            self.db.close()


def _print_summary(summary) -> None:
    print(summary.model_dump_json(indent=2))


def cmd_train(args, config: RunConfig, output_dir: Path, registry: RegistryHandle) -> int:
    from services.training_service import run_training

    trained, evaluation = run_training(config, output_dir)
    registry.complete(
        summary=evaluation.summary,
        checkpoint_path=str(output_dir / CHECKPOINT_NAME),
        steps=trained.steps,
        wall_time=trained.wall_time,
    )
    _print_summary(evaluation.summary)
    return 0


def _checkpoints(args, config: RunConfig) -> list[Path]:
    if args.checkpoint:
        return list(args.checkpoint)
    default = output_directory(config, "train") / CHECKPOINT_NAME
    if not default.exists():
        raise UsageError("no --checkpoint given and no trained model in the output directory")
    return [default]


def cmd_eval(args, config: RunConfig, output_dir: Path, registry: RegistryHandle) -> int:
    from services.training_service import run_evaluation

    checkpoints = _checkpoints(args, config)
    evaluation = run_evaluation(config, checkpoints, output_dir)
    registry.complete(summary=evaluation.summary, checkpoint_path=str(checkpoints[0]))
    _print_summary(evaluation.summary)
    return 0


def cmd_uncertainty(args, config: RunConfig, output_dir: Path, registry: RegistryHandle) -> int:
    from services.training_service import run_evaluation

    checkpoints = _checkpoints(args, config)
    summary = run_evaluation(config, checkpoints, output_dir).summary
    registry.complete(summary=summary, checkpoint_path=str(checkpoints[0]))
    print(f"{'threshold':>10} {'PAvPU':>8} {'uncertain':>10}")
    for key, value in summary.pavpu.items():
        print(f"{key:>10} {value:8.4f} {summary.uncertain_fraction[key]:10.4f}")
    print(f"accuracy {summary.accuracy:.4f}  test log-likelihood {summary.test_log_likelihood:.4f}")
    return 0


def cmd_ensemble(args, config: RunConfig, output_dir: Path, registry: RegistryHandle) -> int:
    from services.training_service import run_ensemble

    if args.workers < 1:
        raise UsageError("--workers must be at least 1")
    evaluation = run_ensemble(config, output_dir, args.members, args.workers)
    registry.complete(summary=evaluation.summary)
    _print_summary(evaluation.summary)
    return 0


def cmd_export_samples(args, config: RunConfig, output_dir: Path, registry: RegistryHandle) -> int:
    from services.training_service import export_samples

    checkpoint = args.checkpoint or _checkpoints(args, config)[0]
    path = export_samples(config, checkpoint, output_dir, args.count)
    registry.complete(checkpoint_path=str(checkpoint))
    print(path)
    return 0


RUN_COMMANDS: dict[str, Callable] = {
    "train": cmd_train,
    "eval": cmd_eval,
    "uncertainty": cmd_uncertainty,
    "ensemble": cmd_ensemble,
    "export-samples": cmd_export_samples,
}


def run_command(args: argparse.Namespace) -> int:
    config = load_config(args)
    output_dir = output_directory(config, args.command)
    registry = RegistryHandle(enabled=not args.no_registry)
    try:
        registry.register(config, args.command, output_dir)
        return RUN_COMMANDS[args.command](args, config, output_dir, registry)
    except BaseException as e:
        # interrupts and I/O failures leave partial outputs too
        message = str(e) if isinstance(e, DropoutToolkitError) else f"{type(e).__name__}: {e}"
        mark_failed(output_dir, f"{type(e).__name__}: {e}")
        registry.fail(message)
        raise
    finally:
        registry.close()


def main(argv: Optional[Sequence[str]] = None) -> int:
    logging.basicConfig(
        level=settings.LOG_LEVEL.upper(),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        args = build_parser().parse_args(argv)
        if args.command == "gradcheck":
            from services.gradcheck_service import run_gradcheck

            report = run_gradcheck(quick=args.quick, seed=args.seed)
            for check in report.checks:
                print(f"{'PASS' if check.passed else 'FAIL'} {check.name} {check.detail}")
            return 0 if report.passed else 3
        if args.command == "serve":
            from run import serve

            serve(args.host, args.port, args.reload)
            return 0
        return run_command(args)
    except DropoutToolkitError as e:
        logger.error("%s", e)
        return e.exit_code


if __name__ == "__main__":
    sys.exit(main())
