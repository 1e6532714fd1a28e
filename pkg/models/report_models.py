from typing import Dict, List, Optional

from pydantic import BaseModel, Field, model_validator


class StepReport(BaseModel):
    """One training step; ELBO terms are batch sums."""

    epoch: int = 0
    step: int = 0
    batch_size: int
    estimator: str
    elbo: float
    log_likelihood: float
    kl: float
    kl_kind: str
    grad_norms: Dict[str, float] = {}
    arm_noop_sites: int = 0
    pseudo_passes: int = 0
    forward_passes: int = 1
    saturated_probabilities: int = 0
    # kept in memory only so metrics files stay byte-identical across runs
    wall_time: float = Field(0.0, exclude=True)

    @model_validator(mode="after")
    def check_terms(self):
        values = [self.elbo, self.log_likelihood, self.kl, *self.grad_norms.values()]
        if any(v != v or v in (float("inf"), float("-inf")) for v in values):
            raise ValueError("step report holds non-finite values")
        if abs(self.elbo - (self.log_likelihood - self.kl)) > 1e-9 * max(1.0, abs(self.elbo)):
            raise ValueError("elbo must equal log-likelihood minus KL")
        return self


class UncertaintyVerdict(BaseModel):
    top_class: int
    runner_up: int
    t_statistic: float
    degrees_of_freedom: float
    p_value: float = Field(ge=0.0, le=1.0)
    degenerate: bool = False
    certain: Dict[str, bool]


class EvalRecord(BaseModel):
    input_id: int
    true_label: int
    top_class: int
    accuracy: float = Field(ge=0.0, le=1.0)
    predictive_ll: float
    verdict: UncertaintyVerdict

    def certainty(self, threshold: float) -> float:
        return 1.0 if self.verdict.certain[threshold_key(threshold)] else 0.0


class EvalSummary(BaseModel):
    n_records: int
    accuracy: float
    point_accuracy: Optional[float] = None
    accuracy_source: str
    pavpu: Dict[str, float]
    uncertain_fraction: Dict[str, float]
    test_log_likelihood: float
    degenerate_tests: int
    k_samples: int
    ensemble_size: int = 1
    parameter_overhead: Dict[str, float] = {}


class CheckResult(BaseModel):
    name: str
    passed: bool
    detail: str = ""


class GradcheckReport(BaseModel):
    checks: List[CheckResult]

    @property
    def passed(self) -> bool:
        return all(check.passed for check in self.checks)


def threshold_key(threshold: float) -> str:
    return f"{threshold:g}"
