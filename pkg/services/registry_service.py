"""Run registry over the SQLAlchemy ``runs`` table."""
from __future__ import annotations

import logging
from typing import Optional

from sqlalchemy import func
from sqlalchemy.orm import Session

from database.models import Run
from models.report_models import EvalSummary
from models.run_api_models import RunStats, RunStatus
from models.run_models import RunConfig

logger = logging.getLogger(__name__)


def register_run(db: Session, config: RunConfig, command: str, output_dir: str) -> Run:
    run = Run(
        name=config.name,
        status=RunStatus.RUNNING,
        command=command,
        variant=config.variant.value,
        estimator=config.estimator.value,
        dataset=config.dataset.value,
        seed=config.seed,
        noise_variance=config.noise_variance,
        ood=config.ood,
        output_dir=str(output_dir),
        config=config.model_dump(mode="json"),
    )
    db.add(run)
    db.commit()
    db.refresh(run)
    logger.info("registered run %d (%s, %s)", run.id, command, run.variant)
    return run


def complete_run(
    db: Session,
    run_id: int,
    summary: Optional[EvalSummary] = None,
    checkpoint_path: Optional[str] = None,
    steps: int = 0,
    wall_time: Optional[float] = None,
) -> Optional[Run]:
    run = get_run(db, run_id)
    if run is None:
        return None
    run.status = RunStatus.COMPLETED
    run.steps = steps
    run.wall_time = wall_time
    if checkpoint_path is not None:
        run.checkpoint_path = str(checkpoint_path)
    if summary is not None:
        run.accuracy = summary.accuracy
        run.pavpu_005 = summary.pavpu.get("0.05")
        run.test_log_likelihood = summary.test_log_likelihood
    db.commit()
    db.refresh(run)
    return run


def fail_run(db: Session, run_id: int, message: str) -> Optional[Run]:
    run = get_run(db, run_id)
    if run is None:
        return None
    run.status = RunStatus.FAILED
    run.error = message
    db.commit()
    db.refresh(run)
    logger.warning("run %d failed: %s", run_id, message)
    return run


def get_run(db: Session, run_id: int) -> Optional[Run]:
    return db.query(Run).filter(Run.id == run_id).first()


def list_runs(
    db: Session,
    skip: int = 0,
    limit: int = 100,
    variant: Optional[str] = None,
    status: Optional[str] = None,
) -> list[Run]:
    query = db.query(Run)
    if variant:
        query = query.filter(Run.variant == variant)
    if status:
        query = query.filter(Run.status == RunStatus(status))
    return query.order_by(Run.id).offset(skip).limit(limit).all()


def delete_run(db: Session, run_id: int) -> bool:
    run = get_run(db, run_id)
    if run is None:
        return False
    db.delete(run)
    db.commit()
    return True


def run_stats(db: Session) -> RunStats:
    total = db.query(Run).count()
    by_variant = dict(db.query(Run.variant, func.count(Run.id)).group_by(Run.variant).all())
    by_status = {
        status.value if isinstance(status, RunStatus) else str(status): count
        for status, count in db.query(Run.status, func.count(Run.id)).group_by(Run.status).all()
    }
    accuracy = {
        variant: float(mean)
        for variant, mean in db.query(Run.variant, func.avg(Run.accuracy))
        .filter(Run.accuracy.isnot(None))
        .group_by(Run.variant)
        .all()
    }
    return RunStats(
        total_runs=total,
        by_variant=by_variant,
        by_status=by_status,
        mean_accuracy_by_variant=accuracy,
    )
