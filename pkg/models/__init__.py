from .network_models import DropoutVariant, MlpSpec, Nonlinearity, SiteConfig
from .run_models import AccuracySource, DatasetName, EstimatorName, KlMode, OptimizerSettings, RunConfig, SyntheticSpec
from .report_models import CheckResult, EvalRecord, EvalSummary, GradcheckReport, StepReport, UncertaintyVerdict
from .run_api_models import PredictRequest, PredictResponse, RunStats, RunStatus
