from datetime import datetime
from enum import Enum
from typing import Any, Dict, List, Optional

from pydantic import BaseModel, ConfigDict, Field

from models.report_models import UncertaintyVerdict


class RunStatus(str, Enum):
    RUNNING = "running"
    COMPLETED = "completed"
    FAILED = "failed"


class Run(BaseModel):
    model_config = ConfigDict(from_attributes=True)

    id: int
    name: Optional[str] = None
    status: RunStatus
    command: str
    variant: str
    estimator: str
    dataset: str
    seed: int
    noise_variance: float = 0.0
    ood: bool = False
    output_dir: str
    checkpoint_path: Optional[str] = None
    accuracy: Optional[float] = None
    pavpu_005: Optional[float] = None
    test_log_likelihood: Optional[float] = None
    steps: int = 0
    wall_time: Optional[float] = None
    error: Optional[str] = None
    config: Optional[Dict[str, Any]] = None
    created_at: Optional[datetime] = None
    updated_at: Optional[datetime] = None


class PredictRequest(BaseModel):
    inputs: List[List[float]] = Field(min_length=1)
    k: int = Field(20, ge=2, le=1000)
    seed: int = 0
    thresholds: List[float] = Field(default_factory=lambda: [0.01, 0.05, 0.1], min_length=1)


class InputPrediction(BaseModel):
    point_probabilities: List[float]
    predictive_mean: List[float]
    verdict: UncertaintyVerdict


class PredictResponse(BaseModel):
    run_id: int
    k: int
    predictions: List[InputPrediction]


class RunStats(BaseModel):
    total_runs: int
    by_variant: Dict[str, int]
    by_status: Dict[str, int]
    mean_accuracy_by_variant: Dict[str, float]
