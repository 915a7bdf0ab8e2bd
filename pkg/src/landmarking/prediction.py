"""End-to-end dynamic prediction for the five supported methods."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Iterable, Mapping, Sequence

import numpy as np

from .data import LandmarkDataset, Subject, build_landmark, locf
from .errors import DataError
from .gp import (
    DEFAULT_EPSILON,
    CovariatePath,
    FitOptions,
    FittedLongitudinal,
    TrendSpec,
    blup_at_s,
    conditional_path,
    fit_gp,
)
from .revival import (
    MarginalSurvival,
    RevivalModel,
    direct_revival_predict,
    fit_revival,
    marginal_survival,
    revival_conditional_path,
    revival_posterior,
)
from .survival import CoxFit, expand_counting_process, fit_cox, predict_survival


class Method(str, Enum):
    LOCF = "LOCF"
    BLUP = "BLUP"
    XHAT_GP = "XHAT_GP"
    XHAT_REVIVAL = "XHAT_REVIVAL"
    DIRECT_REVIVAL = "DIRECT_REVIVAL"

    @property
    def uses_gp(self) -> bool:
        return self in (Method.BLUP, Method.XHAT_GP)

    @property
    def uses_revival(self) -> bool:
        return self in (Method.XHAT_REVIVAL, Method.DIRECT_REVIVAL)

    @property
    def uses_cox(self) -> bool:
        return self is not Method.DIRECT_REVIVAL

    @classmethod
    def parse(cls, names: str | Iterable[str]) -> tuple["Method", ...]:
        if isinstance(names, str):
            names = [n.strip() for n in names.split(",") if n.strip()]
        names = list(names)
        if len(names) == 1 and names[0].lower() == "all":
            return tuple(cls)
        out = []
        for n in names:
            try:
                out.append(cls(n.upper()))
            except ValueError:
                raise DataError(f"unknown method {n!r}; choose from {[m.value for m in cls]}") from None
        return tuple(out)


@dataclass(frozen=True)
class PipelineConfig:
    s: float = 3.0
    w: float = 2.0
    tau: float = 9.0
    epsilon: float = DEFAULT_EPSILON
    exclude_baseline: bool = True
    adjust_arm: bool = False
    per_arm_km: bool = True
    shared_noise: bool = False
    fit_options: FitOptions = field(default_factory=FitOptions)

    def options(self) -> FitOptions:
        return replace(self.fit_options, exclude_baseline=self.exclude_baseline)


@dataclass(frozen=True)
class FittedModels:
    """Upstream longitudinal models fitted on one training set."""

    gp: FittedLongitudinal | None = None
    revival: RevivalModel | None = None
    marginal: MarginalSurvival | Mapping[int, MarginalSurvival] | None = None


def fit_models(subjects: Sequence[Subject], methods: Iterable[Method], config: PipelineConfig,
               warm: FittedModels | None = None, warm_options: FitOptions | None = None) -> FittedModels:
    """Fit whatever upstream models ``methods`` need.

    With ``warm``, the optimizer starts from the warm models' covariance
    parameters and uses ``warm_options`` (typically without restarts).
    """
    methods = tuple(methods)
    options = config.options()
    if warm is not None and warm_options is not None:
        options = replace(warm_options, exclude_baseline=config.exclude_baseline)
    gp = revival = marginal = None
    if any(m.uses_gp for m in methods):
        start = warm.gp.cov if warm is not None and warm.gp is not None else None
        gp = fit_gp(subjects, TrendSpec("arm_linear", config.epsilon), replace(options, start=start))
    if any(m.uses_revival for m in methods):
        starts = ()
        if warm is not None and warm.revival is not None:
            starts = (warm.revival.dead.cov, warm.revival.survivor.cov)
        revival = fit_revival(subjects, config.tau, config.epsilon, options, config.shared_noise, starts)
        marginal = marginal_survival(subjects, config.s, config.tau, config.per_arm_km)
    return FittedModels(gp, revival, marginal)


def subject_path(method: Method, subject: Subject, s: float, grid: np.ndarray,
                 models: FittedModels, tau: float | None = None) -> CovariatePath:
    """Covariate path of one subject on ``grid`` using history up to ``s``."""
    history = subject.history(s)
    if not history:
        raise DataError(f"subject {subject.id}: empty history at s={s}")
    if method is Method.LOCF:
        return CovariatePath.constant(s, grid, locf(subject, s))
    if method is Method.BLUP:
        return CovariatePath.constant(s, grid, blup_at_s(_need(models.gp, method), history, subject.arm, s))
    if method is Method.XHAT_GP:
        return conditional_path(_need(models.gp, method), history, subject.arm, grid, s=s)
    if method is Method.XHAT_REVIVAL:
        model = _need(models.revival, method)
        return revival_conditional_path(model, models.marginal, history, subject.arm, s, grid,
                                        model.tau if tau is None else tau)
    raise DataError(f"method {method.value} has no covariate path")


def _need(model, method):
    if model is None:
        raise DataError(f"method {method.value} needs a fitted upstream model")
    return model


def make_paths(method: Method, landmark: LandmarkDataset, models: FittedModels) -> dict[str, CovariatePath]:
    if method is Method.DIRECT_REVIVAL:
        return {}
    return {sub.id: subject_path(method, sub, landmark.s, landmark.event_grid, models)
            for sub in landmark.subjects}


@dataclass(frozen=True)
class TrainedPredictor:
    method: Method
    s: float
    w: float
    models: FittedModels
    cox: CoxFit | None = None
    event_grid: np.ndarray | None = None
    adjust_arm: bool = False


@dataclass(frozen=True)
class PredictionResult:
    subject_id: str
    method: Method
    pi_hat: float
    diagnostics: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"id": self.subject_id, "method": self.method.value, "pi_hat": self.pi_hat,
                "diagnostics": self.diagnostics}


def _check_revival_window(method: Method, s: float, w: float, models: FittedModels):
    if method.uses_revival and models.revival is not None and s + w > models.revival.tau:
        raise DataError(f"revival methods require s + w <= tau ({s} + {w} > {models.revival.tau})")


def train(method: Method, landmark: LandmarkDataset, models: FittedModels,
          adjust_arm: bool = False) -> TrainedPredictor:
    """Fit the landmark Cox model on predictable paths (or bundle the revival models)."""
    _check_revival_window(method, landmark.s, landmark.w, models)
    if method is Method.DIRECT_REVIVAL:
        _need(models.revival, method)
        return TrainedPredictor(method, landmark.s, landmark.w, models, None, landmark.event_grid)
    paths = make_paths(method, landmark, models)
    fixed = {sub.id: [sub.arm] for sub in landmark.subjects} if adjust_arm else None
    table = expand_counting_process(landmark, paths, fixed, ("arm",))
    cox = fit_cox(table)
    return TrainedPredictor(method, landmark.s, landmark.w, models, cox, landmark.event_grid, adjust_arm)


def predict_subject(trained: TrainedPredictor, subject: Subject, s: float | None = None,
                    w: float | None = None) -> PredictionResult:
    s = trained.s if s is None else s
    w = trained.w if w is None else w
    _check_revival_window(trained.method, s, w, trained.models)
    if not subject.history(s):
        raise DataError(f"subject {subject.id}: empty history at s={s}")
    if trained.method is Method.DIRECT_REVIVAL:
        models = trained.models
        support, post = revival_posterior(models.revival, models.marginal, subject.history(s), subject.arm, s)
        pi = direct_revival_predict(models.revival, models.marginal, subject.history(s), subject.arm, s, w)
        nz = post[post > 0]
        diag = {"posterior_entropy": float(-(nz * np.log(nz)).sum()), "posterior_mass_tau": float(post[-1])}
        return PredictionResult(subject.id, trained.method, pi, diag)
    path = subject_path(trained.method, subject, s, trained.event_grid, trained.models)
    fixed = (subject.arm,) if trained.adjust_arm else ()
    pi = predict_survival(trained.cox, path, s, w, fixed)
    diag = {}
    if path.values.size:
        diag = {"path_first": float(path.values[0]), "path_last": float(path.values[-1]),
                "path_mean": float(path.values.mean())}
    return PredictionResult(subject.id, trained.method, pi, diag)


def run_pipeline(subjects: Sequence[Subject], methods: Iterable[Method], config: PipelineConfig,
                 predict_for: Sequence[Subject] | None = None, models: FittedModels | None = None):
    """Fit, train and predict in one pass; returns (models, trained, results per method)."""
    methods = tuple(methods)
    landmark = build_landmark(subjects, config.s, config.w)
    models = models or fit_models(subjects, methods, config)
    targets = landmark.subjects if predict_for is None else predict_for
    trained, results = {}, {}
    for m in methods:
        trained[m] = train(m, landmark, models, config.adjust_arm)
        results[m] = [predict_subject(trained[m], sub) for sub in targets]
    return models, trained, results
