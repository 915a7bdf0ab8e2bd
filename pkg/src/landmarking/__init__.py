"""Landmark dynamic prediction of survival from longitudinal biomarkers."""

__version__ = "0.1.0"

from .data import LandmarkDataset, Measurement, Subject, build_landmark, load_dataset, locf, write_dataset
from .errors import (
    ConfigError,
    ConvergenceError,
    DataError,
    EmptyDatasetError,
    LandmarkingError,
    NumericalError,
)
from .evaluation import (
    CalibrationResult,
    CVScheme,
    EvaluationReport,
    brier_kl,
    calibration_cox,
    cross_validate,
    cross_validate_methods,
    evaluate,
    evaluate_predictions,
    lrt_bivariate,
    null_predictions,
    recalibrate,
)
from .gp import (
    CovarianceParams,
    CovariatePath,
    FitOptions,
    FittedLongitudinal,
    TrendSpec,
    blup_at_s,
    conditional_path,
    covariance_matrix,
    fit_gp,
    gaussian_loglik,
)
from .prediction import (
    FittedModels,
    Method,
    PipelineConfig,
    PredictionResult,
    TrainedPredictor,
    fit_models,
    predict_subject,
    run_pipeline,
    train,
)
from .revival import (
    MarginalSurvival,
    RevivalModel,
    direct_revival_predict,
    fit_revival,
    history_logdensity,
    marginal_survival,
    revival_conditional_path,
    revival_posterior,
)
from .sim import SimConfig, bruteforce_bayes, bruteforce_conditional_mean, simulate, simulate_subject
from .survival import (
    CoxFit,
    RiskSetTable,
    StepFunction,
    expand_counting_process,
    fit_cox,
    kaplan_meier,
    partial_loglik,
    predict_survival,
    reverse_km,
)
