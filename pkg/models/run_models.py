from enum import Enum
from typing import List, Optional

from pydantic import BaseModel, Field, field_validator, model_validator

from models.network_models import DropoutVariant, Nonlinearity


class DatasetName(str, Enum):
    MNIST = "mnist"
    SYNTHETIC = "synthetic"


class EstimatorName(str, Enum):
    ARM_SEQUENTIAL = "arm-sequential"
    ARM_INDEPENDENT = "arm-independent"
    REINFORCE = "reinforce"
    REPARAM = "reparam"
    BACKPROP = "backprop"


class AccuracySource(str, Enum):
    PREDICTIVE_MEAN = "predictive-mean"
    POINT = "point"


class KlMode(str, Enum):
    ANALYTIC = "analytic"
    SAMPLED = "sampled"


BERNOULLI_ESTIMATORS = (EstimatorName.ARM_SEQUENTIAL, EstimatorName.ARM_INDEPENDENT, EstimatorName.REINFORCE)


def default_estimator(variant: DropoutVariant) -> EstimatorName:
    if variant == DropoutVariant.CONTEXTUAL_BERNOULLI:
        return EstimatorName.ARM_SEQUENTIAL
    if variant == DropoutVariant.CONTEXTUAL_GAUSSIAN:
        return EstimatorName.REPARAM
    return EstimatorName.BACKPROP


def check_estimator(variant: DropoutVariant, estimator: EstimatorName) -> None:
    """Raise ValueError when ``estimator`` cannot train ``variant`` sites."""
    if estimator in BERNOULLI_ESTIMATORS:
        allowed = variant == DropoutVariant.CONTEXTUAL_BERNOULLI
    elif estimator == EstimatorName.REPARAM:
        allowed = variant == DropoutVariant.CONTEXTUAL_GAUSSIAN
    else:
        allowed = variant not in (DropoutVariant.CONTEXTUAL_BERNOULLI, DropoutVariant.CONTEXTUAL_GAUSSIAN)
    if not allowed:
        raise ValueError(f"estimator {estimator.value} cannot train {variant.value} sites")


class OptimizerSettings(BaseModel):
    learning_rate: float = Field(1e-3, gt=0)
    beta1: float = Field(0.9, ge=0, lt=1)
    beta2: float = Field(0.999, ge=0, lt=1)
    epsilon: float = Field(1e-8, gt=0)
    batch_size: int = Field(128, ge=1)


class SyntheticSpec(BaseModel):
    """Isotropic Gaussian blobs with class means spaced ``separation`` apart."""

    num_classes: int = Field(2, ge=2)
    dimension: int = Field(2, ge=1)
    separation: float = Field(3.0, gt=0)
    n_train: int = Field(2000, ge=1)
    n_test: int = Field(1000, ge=1)


class RunConfig(BaseModel):
    name: Optional[str] = None
    dataset: DatasetName = DatasetName.MNIST
    data_dir: Optional[str] = None
    synthetic: SyntheticSpec = SyntheticSpec()
    noise_variance: float = Field(0.0, ge=0)
    ood: bool = False
    widths: List[int] = Field(default_factory=lambda: [784, 300, 100, 10], min_length=2)
    site_stages: Optional[List[int]] = None
    variant: DropoutVariant = DropoutVariant.CONTEXTUAL_BERNOULLI
    estimator: Optional[EstimatorName] = None
    kl_mode: KlMode = KlMode.ANALYTIC
    rate: Optional[float] = Field(None, gt=0, lt=1)
    init_rate: float = Field(0.2, gt=0, lt=1)
    temperature: float = Field(0.1, gt=0)
    gating_dropout_rate: Optional[float] = Field(None, gt=0, lt=1)
    nonlinearity: Nonlinearity = Nonlinearity.LEAKY_RELU
    gamma: int = Field(10, ge=1)
    t: float = Field(0.01, gt=0)
    optimizer: OptimizerSettings = OptimizerSettings()
    epochs: int = Field(1, ge=0)
    max_steps: Optional[int] = Field(None, ge=1)
    train_subset: Optional[int] = Field(None, ge=1)
    eval_subset: Optional[int] = Field(None, ge=1)
    k_samples: int = Field(20, ge=2)
    ensemble_size: int = Field(1, ge=1)
    thresholds: List[float] = Field(default_factory=lambda: [0.01, 0.05, 0.1], min_length=1)
    accuracy_source: AccuracySource = AccuracySource.PREDICTIVE_MEAN
    eval_batch_size: int = Field(500, ge=1)
    seed: int = 0
    output_dir: Optional[str] = None
    preprocessing: str = "scale-0-1"

    @field_validator("thresholds")
    @classmethod
    def check_thresholds(cls, value: List[float]) -> List[float]:
        if any(not 0.0 < tau < 1.0 for tau in value):
            raise ValueError("p-value thresholds must lie in (0, 1)")
        return sorted(set(value))

    @model_validator(mode="after")
    def check_combination(self):
        if self.estimator is None:
            self.estimator = default_estimator(self.variant)
        check_estimator(self.variant, self.estimator)
        if self.variant.is_fixed_rate and self.rate is None:
            self.rate = 0.2
        if not self.variant.is_fixed_rate and self.rate is not None:
            raise ValueError(f"{self.variant.value} does not take a fixed rate")
        if self.gating_dropout_rate is not None and self.variant != DropoutVariant.CONTEXTUAL_GATING:
            raise ValueError("gating_dropout_rate only applies to contextual-gating")
        if self.dataset == DatasetName.MNIST:
            if self.widths[0] != 784 or self.widths[-1] != 10:
                raise ValueError("MNIST runs need input width 784 and 10 classes")
        else:
            if self.widths[0] != self.synthetic.dimension:
                raise ValueError("input width must equal the synthetic dimension")
            if self.widths[-1] != self.synthetic.num_classes:
                raise ValueError("output width must equal the synthetic class count")
        if self.ood and self.noise_variance == 0.0:
            self.noise_variance = 1.0
        return self

    @property
    def train_noise_variance(self) -> float:
        return 0.0 if self.ood else self.noise_variance

    @property
    def test_noise_variance(self) -> float:
        return self.noise_variance
