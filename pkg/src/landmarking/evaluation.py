"""Cross-validated evaluation: prediction errors, calibration slopes and LR comparisons."""

from __future__ import annotations

import hashlib
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping, Sequence

import numpy as np

from .data import LandmarkDataset, Subject, build_landmark
from .errors import DataError, LandmarkingError
from .prediction import (
    Method,
    PipelineConfig,
    fit_models,
    predict_subject,
    train,
)
from .survival import fit_cox, kaplan_meier, reverse_km, time_fixed_table

log = logging.getLogger(__name__)

CLIP = 1e-12


@dataclass(frozen=True)
class CVScheme:
    kind: str = "loo"
    k: int | None = None
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("loo", "kfold"):
            raise DataError(f"unknown CV scheme {self.kind!r}")
        if self.kind == "kfold" and (self.k is None or self.k < 2):
            raise DataError("k-fold CV needs k >= 2")

    @classmethod
    def loo(cls) -> "CVScheme":
        return cls("loo")

    @classmethod
    def kfold(cls, k: int, seed: int = 0) -> "CVScheme":
        return cls("kfold", k, seed)

    def folds(self, ids: Sequence[str]) -> list[list[str]]:
        ids = sorted(ids)
        if self.kind == "loo":
            return [[i] for i in ids]
        key = lambda i: hashlib.sha256(f"{self.seed}:{i}".encode()).hexdigest()
        order = sorted(ids, key=key)
        k = min(self.k, len(order))
        return [sorted(order[j::k]) for j in range(k)]


def _fold_job(args):
    subjects, held_out, methods, config, warm, warm_options = args
    held = set(held_out)
    training = [sub for sub in subjects if sub.id not in held]
    landmark = build_landmark(training, config.s, config.w)
    models = fit_models(training, methods, config, warm, warm_options)
    test = [sub for sub in subjects if sub.id in held]
    out = {}
    for m in methods:
        trained = train(m, landmark, models, config.adjust_arm)
        out[m] = {sub.id: predict_subject(trained, sub).pi_hat for sub in test}
    return out


def cross_validate_methods(subjects: Sequence[Subject], methods: Iterable[Method], scheme: CVScheme,
                           config: PipelineConfig, warm_start: bool = True, workers: int = 1,
                           skipped: list | None = None) -> dict[Method, dict[str, float]]:
    """Held-out predictions for every landmark subject, refitting all models per fold.

    With ``warm_start`` the fold fits start from the full-data covariance
    estimates without random restarts; folds then differ only in their data.
    """
    methods = tuple(methods)
    subjects = sorted(subjects, key=lambda sub: sub.id)
    landmark = build_landmark(subjects, config.s, config.w)
    warm = warm_options = None
    if warm_start:
        warm = fit_models(subjects, methods, config)
        warm_options = replace(config.options(), restarts=0)
    folds = scheme.folds(landmark.ids)
    jobs = [(subjects, fold, methods, config, warm, warm_options) for fold in folds]
    results: dict[Method, dict[str, float]] = {m: {} for m in methods}

    def collect(fold, res):
        for m in methods:
            results[m].update(res[m])

    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(_fold_job, job) for job in jobs]
            for fold, fut in zip(folds, futures):
                try:
                    collect(fold, fut.result())
                except LandmarkingError as exc:
                    _skip(fold, exc, skipped)
    else:
        for fold, job in zip(folds, jobs):
            try:
                collect(fold, _fold_job(job))
            except LandmarkingError as exc:
                _skip(fold, exc, skipped)
    return {m: dict(sorted(results[m].items())) for m in methods}


def _skip(fold, exc, skipped):
    log.warning("skipping CV fold %s: %s", fold, exc)
    if skipped is not None:
        skipped.append({"fold": list(fold), "error": str(exc)})


def cross_validate(subjects: Sequence[Subject], method: Method, s: float, w: float,
                   scheme: CVScheme, config: PipelineConfig | None = None, **kwargs) -> dict[str, float]:
    config = replace(config or PipelineConfig(), s=s, w=w)
    return cross_validate_methods(subjects, [method], scheme, config, **kwargs)[method]


def null_predictions(landmark: LandmarkDataset) -> dict[str, float]:
    """Kaplan-Meier estimate of surviving the window, identical for every subject."""
    km = kaplan_meier(landmark.time, landmark.status)
    p = km(landmark.horizon) / km.left(landmark.s) if landmark.s > 0 else km(landmark.horizon)
    return {sid: float(p) for sid in landmark.ids}


def _aligned(predictions: Mapping[str, float], landmark: LandmarkDataset):
    missing = [sid for sid in landmark.ids if sid not in predictions]
    keep = np.array([sid in predictions for sid in landmark.ids])
    if missing and keep.sum() == 0:
        raise DataError("no predictions for landmark subjects")
    pi = np.array([predictions[sid] for sid in landmark.ids if sid in predictions], dtype=float)
    return keep, pi


def ipcw_weights(landmark: LandmarkDataset) -> tuple[np.ndarray, np.ndarray]:
    """Outcome (survived the window) and inverse-probability-of-censoring weights.

    The censoring distribution is the reverse Kaplan-Meier on the untruncated
    follow-up of the landmark subjects, conditional on being uncensored at ``s``.
    """
    t = np.array([sub.event_time for sub in landmark.subjects])
    d = np.array([sub.status for sub in landmark.subjects])
    horizon = landmark.horizon
    g = reverse_km(t, d)
    g_s = g(landmark.s)
    y = ((t > horizon) | ((t == horizon) & (d == 0))).astype(float)
    weights = np.zeros(t.size)
    dead = (d == 1) & (t <= horizon)
    weights[dead] = g_s / g.left(t[dead]) if dead.any() else 0.0
    alive_past = t > horizon
    weights[alive_past] = g_s / g(horizon)
    at_horizon = (t == horizon) & (d == 0)
    weights[at_horizon] = g_s / g.left(horizon)
    if not np.all(np.isfinite(weights)):
        raise DataError("censoring survival is zero at a required time")
    return y, weights


def brier_kl(predictions: Mapping[str, float], landmark: LandmarkDataset) -> tuple[float, float]:
    """IPCW Brier score and Kullback-Leibler (log-loss) error of window survival."""
    keep, pi = _aligned(predictions, landmark)
    y, weights = ipcw_weights(landmark)
    y, weights = y[keep], weights[keep]
    pi = np.clip(pi, CLIP, 1.0 - CLIP)
    n = y.size
    brier = float(np.sum(weights * (y - pi) ** 2) / n)
    kl = float(np.sum(weights * -(y * np.log(pi) + (1 - y) * np.log(1 - pi))) / n)
    return brier, kl


def cloglog(pi) -> np.ndarray:
    p = np.clip(np.asarray(pi, dtype=float), CLIP, 1.0 - CLIP)
    return np.log(-np.log(p))


@dataclass(frozen=True)
class CalibrationResult:
    beta: float
    se: float
    chi_sq: float
    lr_chi_sq: float

    def to_dict(self) -> dict:
        return {"beta": self.beta, "se": self.se, "chi_sq": self.chi_sq, "lr_chi_sq": self.lr_chi_sq}


def _calibration_fit(predictions, landmark):
    keep, pi = _aligned(predictions, landmark)
    if not keep.all():
        raise DataError("calibration needs a prediction for every landmark subject")
    z = cloglog(pi)
    if np.ptp(z) == 0:
        raise DataError("calibration needs non-constant predictions")
    return fit_cox(time_fixed_table(landmark, z[:, None], ("cloglog",))), z


def calibration_cox(predictions: Mapping[str, float], landmark: LandmarkDataset) -> CalibrationResult:
    """Univariate Cox model on cloglog-transformed predictions; Wald and LR chi-squared."""
    fit, _ = _calibration_fit(predictions, landmark)
    beta, se = float(fit.beta[0]), float(fit.se[0])
    return CalibrationResult(beta, se, (beta / se) ** 2, fit.lr_chi_sq)


def lrt_bivariate(reference: Mapping[str, float], other: Mapping[str, float],
                  landmark: LandmarkDataset) -> float:
    """LR statistic for adding ``other`` to a Cox model already holding ``reference``."""
    _, pr = _aligned(reference, landmark)
    _, po = _aligned(other, landmark)
    zr, zo = cloglog(pr), cloglog(po)
    uni = fit_cox(time_fixed_table(landmark, zr[:, None], ("reference",)))
    bi = fit_cox(time_fixed_table(landmark, np.column_stack([zr, zo]), ("reference", "other")))
    return float(2.0 * (bi.loglik_final - uni.loglik_final))


def recalibrate(predictions: Mapping[str, float], landmark: LandmarkDataset) -> dict[str, float]:
    """Model-based survival from the univariate calibration Cox model."""
    fit, z = _calibration_fit(predictions, landmark)
    sel = (fit.event_times > landmark.s) & (fit.event_times <= landmark.horizon)
    cum = float(fit.increments[sel].sum())
    pi = np.exp(-cum * np.exp(fit.beta[0] * z))
    return {sid: float(p) for sid, p in zip(landmark.ids, pi)}


@dataclass
class MethodScores:
    method: str
    brier: float
    kl: float
    brier_reduction: float
    kl_reduction: float
    recalibrated: bool
    calibration: CalibrationResult | None = None
    lrt: float | None = None


@dataclass
class EvaluationReport:
    s: float
    w: float
    n_landmark: int
    n_events: int
    null_brier: float
    null_kl: float
    reference: str | None
    methods: list[MethodScores] = field(default_factory=list)
    skipped_folds: list = field(default_factory=list)

    def get(self, method: Method | str) -> MethodScores:
        name = method.value if isinstance(method, Method) else method
        for row in self.methods:
            if row.method == name:
                return row
        raise KeyError(name)

    def to_dict(self) -> dict:
        return {
            "s": self.s, "w": self.w, "n_landmark": self.n_landmark, "n_events": self.n_events,
            "null": {"brier": self.null_brier, "kl": self.null_kl},
            "reference": self.reference,
            "methods": [
                {"method": r.method, "brier": r.brier, "kl": r.kl,
                 "brier_reduction_pct": r.brier_reduction, "kl_reduction_pct": r.kl_reduction,
                 "recalibrated": r.recalibrated,
                 "calibration": r.calibration.to_dict() if r.calibration else None,
                 "lrt": r.lrt}
                for r in self.methods
            ],
            "skipped_folds": self.skipped_folds,
        }

    def format_table(self) -> str:
        lines = [f"Landmark s={self.s:g}, window w={self.w:g}: n={self.n_landmark}, deaths={self.n_events}", ""]
        lines.append(f"{'Model':<16}{'Beta':>8}{'SE':>8}{'Chi2':>8}{'LRT':>8}")
        for r in self.methods:
            c = r.calibration
            lrt = "---" if r.lrt is None else f"{r.lrt:.2f}"
            if c is None:
                lines.append(f"{r.method:<16}{'':>8}{'':>8}{'':>8}{lrt:>8}")
            else:
                lines.append(f"{r.method:<16}{c.beta:>8.3f}{c.se:>8.3f}{c.chi_sq:>8.2f}{lrt:>8}")
        lines += ["", f"{'Model':<16}{'Brier':>18}{'KL':>18}",
                  f"{'NULL':<16}{self.null_brier:>18.4f}{self.null_kl:>18.4f}"]
        for r in self.methods:
            b = f"{r.brier:.4f} ({r.brier_reduction:.1f}%)"
            k = f"{r.kl:.4f} ({r.kl_reduction:.1f}%)"
            lines.append(f"{r.method:<16}{b:>18}{k:>18}")
        return "\n".join(lines) + "\n"


def _reduction(null: float, value: float) -> float:
    return 100.0 * (null - value) / null if null else math.nan


def evaluate_predictions(cv: Mapping[Method, Mapping[str, float]], landmark: LandmarkDataset,
                         reference: Method | None = Method.XHAT_REVIVAL,
                         recalibrate_revival: bool = True) -> EvaluationReport:
    null_b, null_k = brier_kl(null_predictions(landmark), landmark)
    methods = list(cv)
    if reference not in cv:
        reference = None
    report = EvaluationReport(landmark.s, landmark.w, len(landmark), int(landmark.status.sum()),
                              null_b, null_k, reference.value if reference else None)
    for m in methods:
        preds = cv[m]
        try:
            cal = calibration_cox(preds, landmark)
        except LandmarkingError as exc:
            log.warning("calibration failed for %s: %s", m.value, exc)
            cal = None
        use_recal = recalibrate_revival and m.uses_revival and cal is not None
        scored = recalibrate(preds, landmark) if use_recal else preds
        b, k = brier_kl(scored, landmark)
        lrt = None
        if reference is not None and m is not reference:
            try:
                lrt = lrt_bivariate(cv[reference], preds, landmark)
            except LandmarkingError as exc:
                log.warning("bivariate LRT failed for %s: %s", m.value, exc)
        report.methods.append(MethodScores(m.value, b, k, _reduction(null_b, b), _reduction(null_k, k),
                                           use_recal, cal, lrt))
    return report


def evaluate(subjects: Sequence[Subject], methods: Iterable[Method], scheme: CVScheme,
             config: PipelineConfig, reference: Method | None = Method.XHAT_REVIVAL,
             workers: int = 1, warm_start: bool = True):
    """Cross-validate ``methods`` and score them; returns (report, cv predictions)."""
    skipped: list = []
    cv = cross_validate_methods(subjects, methods, scheme, config, warm_start, workers, skipped)
    landmark = build_landmark(subjects, config.s, config.w)
    report = evaluate_predictions(cv, landmark, reference)
    report.skipped_folds = skipped
    return report, cv
