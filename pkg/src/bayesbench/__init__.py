"""Desk-scale Bayesian deep learning benchmark toolkit."""

__version__ = "0.1.0"

from .models import (
    ConfigurationError,
    Dataset,
    DivergenceError,
    MLPSpec,
    ParameterVector,
    PredictionSet,
    bma_predict,
    forward,
    init_params,
    log_prior_and_grad,
    nll_and_grad,
)
from .metrics import (
    MetricConfig,
    MetricReport,
    as_binary_classification,
    compute_report,
    ece_sece,
    lml_pslml,
    nll,
    qce_sqce,
    task_accuracy,
    top1_agreement,
    total_variation,
)
from .tasks import (
    ShiftSpec,
    SyntheticTask,
    corrupt,
    make_conjugate_task,
    make_gap_regression,
    make_grouped_classification,
    make_two_moons,
)
from .harness import (
    ExperimentConfig,
    ReportBundle,
    RunRecord,
    compare_to_reference,
    emit_report,
    run_experiment,
)

__all__ = [
    "ConfigurationError",
    "Dataset",
    "DivergenceError",
    "ExperimentConfig",
    "MLPSpec",
    "MetricConfig",
    "MetricReport",
    "ParameterVector",
    "PredictionSet",
    "ReportBundle",
    "RunRecord",
    "ShiftSpec",
    "SyntheticTask",
    "as_binary_classification",
    "bma_predict",
    "compare_to_reference",
    "compute_report",
    "corrupt",
    "ece_sece",
    "emit_report",
    "forward",
    "init_params",
    "lml_pslml",
    "log_prior_and_grad",
    "make_conjugate_task",
    "make_gap_regression",
    "make_grouped_classification",
    "make_two_moons",
    "nll",
    "nll_and_grad",
    "qce_sqce",
    "run_experiment",
    "task_accuracy",
    "top1_agreement",
    "total_variation",
    "__version__",
]
