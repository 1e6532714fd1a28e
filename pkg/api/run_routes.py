import json
from pathlib import Path
from typing import List, Optional

import numpy as np
from fastapi import APIRouter, Depends, HTTPException, Query
from sqlalchemy.orm import Session

from database.database import get_db
from engine import RngStream
from exceptions import DropoutToolkitError
from models.run_api_models import InputPrediction, PredictRequest, PredictResponse, Run as RunModel, RunStats
from services import registry_service
from services.checkpoint_service import load_checkpoint
from services.mlp_service import PredictiveSampleSet, predict_point, predictive_probabilities
from services.training_service import read_metrics
from services.uncertainty_service import certainty_verdict

router = APIRouter(prefix="/runs", tags=["runs"])

@router.get("/", response_model=List[RunModel])
async def get_runs(
    skip: int = Query(0, ge=0),
    limit: int = Query(100, ge=1, le=1000),
    variant: Optional[str] = None,
    status: Optional[str] = Query(None, pattern="^(running|completed|failed)$"),
    db: Session = Depends(get_db)
):
    """List registered runs with optional filtering"""
    return registry_service.list_runs(db, skip, limit, variant, status)

@router.get("/stats/summary", response_model=RunStats)
async def get_run_stats(db: Session = Depends(get_db)):
    """Run counts by variant and status, mean accuracy per variant"""
    return registry_service.run_stats(db)

@router.get("/{run_id}", response_model=RunModel)
async def get_run(run_id: int, db: Session = Depends(get_db)):
    """Get a specific run by ID"""
    run = registry_service.get_run(db, run_id)
    if not run:
        raise HTTPException(status_code=404, detail="Run not found")
    return run

@router.get("/{run_id}/metrics")
async def get_run_metrics(
    run_id: int,
    skip: int = Query(0, ge=0),
    limit: int = Query(1000, ge=1, le=100000),
    db: Session = Depends(get_db)
):
    """Step reports from the run's metrics file"""
    run = registry_service.get_run(db, run_id)
    if not run:
        raise HTTPException(status_code=404, detail="Run not found")
    path = Path(run.output_dir) / "metrics.jsonl"
    if not path.exists():
        raise HTTPException(status_code=404, detail="Run has no metrics file")
    return {"run_id": run_id, "skip": skip, "steps": read_metrics(path, skip, limit)}

@router.get("/{run_id}/summary")
async def get_run_summary(run_id: int, db: Session = Depends(get_db)):
    """Evaluation summary written by eval, uncertainty or ensemble"""
    run = registry_service.get_run(db, run_id)
    if not run:
        raise HTTPException(status_code=404, detail="Run not found")
    path = Path(run.output_dir) / "summary.json"
    if not path.exists():
        raise HTTPException(status_code=404, detail="Run has no summary yet")
    return json.loads(path.read_text())

@router.post("/{run_id}/predict", response_model=PredictResponse)
async def predict(run_id: int, request: PredictRequest, db: Session = Depends(get_db)):
    """Point probabilities, predictive mean and certainty verdict per input"""
    run = registry_service.get_run(db, run_id)
    if not run:
        raise HTTPException(status_code=404, detail="Run not found")
    if not run.checkpoint_path or not Path(run.checkpoint_path).exists():
        raise HTTPException(status_code=404, detail="Run has no checkpoint")
    if any(not 0.0 < tau < 1.0 for tau in request.thresholds):
        raise HTTPException(status_code=422, detail="Thresholds must lie in (0, 1)")

    try:
        model = load_checkpoint(Path(run.checkpoint_path))
        x = np.asarray(request.inputs, dtype=np.float64)
        point = predict_point(model, x)
        draws = predictive_probabilities(model, x, request.k, RngStream(request.seed, (5,)))
    except DropoutToolkitError as e:
        raise HTTPException(status_code=400, detail=str(e))
    except ValueError as e:
        raise HTTPException(status_code=400, detail=f"Invalid inputs: {e}")

    predictions = []
    for row in range(x.shape[0]):
        samples = PredictiveSampleSet(probabilities=draws[row])
        predictions.append(InputPrediction(
            point_probabilities=point[row].tolist(),
            predictive_mean=samples.mean.tolist(),
            verdict=certainty_verdict(samples, request.thresholds),
        ))
    return PredictResponse(run_id=run_id, k=request.k, predictions=predictions)

@router.delete("/{run_id}")
async def delete_run(run_id: int, db: Session = Depends(get_db)):
    """Remove a run from the registry; its files stay on disk"""
    if not registry_service.delete_run(db, run_id):
        raise HTTPException(status_code=404, detail="Run not found")
    return {"message": "Run deleted successfully"}
