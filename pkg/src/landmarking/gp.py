"""Working Gaussian process for a longitudinal marker.

Covariance between two measurements of the same subject::

    C(t1, t2) = sigma1_sq + sigma2_sq * exp(-lambda_decay * |t1 - t2|)
                + sigma3_sq * 1{same occasion}

The trend is linear in a design row built by a :class:`TrendSpec`. Fitting is by
maximum likelihood with the trend coefficients profiled out by generalized least
squares, and the four covariance parameters searched on the log scale.
"""

from __future__ import annotations

import logging
import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy import linalg, optimize

from .data import Measurement, Subject
from .errors import ConvergenceError, DataError, NumericalError

log = logging.getLogger(__name__)

LOG_2PI = math.log(2.0 * math.pi)
DEFAULT_EPSILON = 1.0 / 365.25
JITTER = 1e-8


@dataclass(frozen=True)
class CovarianceParams:
    sigma1_sq: float
    sigma2_sq: float
    lambda_decay: float
    sigma3_sq: float

    def __post_init__(self):
        vals = self.as_tuple()
        if not all(math.isfinite(v) and v >= 0 for v in vals):
            raise DataError(f"covariance parameters must be finite and >= 0, got {vals}")
        if self.sigma2_sq > 0 and self.lambda_decay <= 0:
            raise DataError("lambda_decay must be > 0 when sigma2_sq > 0")

    @property
    def total(self) -> float:
        return self.sigma1_sq + self.sigma2_sq + self.sigma3_sq

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.sigma1_sq, self.sigma2_sq, self.lambda_decay, self.sigma3_sq)

    def to_log(self) -> np.ndarray:
        return np.log(np.array(self.as_tuple(), dtype=float))

    @classmethod
    def from_log(cls, theta) -> "CovarianceParams":
        return cls(*(float(v) for v in np.exp(np.asarray(theta, dtype=float))))

    def to_dict(self) -> dict:
        return dict(zip(("sigma1_sq", "sigma2_sq", "lambda_decay", "sigma3_sq"), self.as_tuple()))


def covariance_matrix(times, params: CovarianceParams, occasions=None) -> np.ndarray:
    """Covariance of marker values at ``times``.

    White noise is shared only by entries with the same occasion id. Without
    ``occasions`` every entry is its own occasion.
    """
    t = np.asarray(times, dtype=float)
    d = np.abs(t[:, None] - t[None, :])
    c = params.sigma1_sq + params.sigma2_sq * np.exp(-params.lambda_decay * d)
    if occasions is None:
        same = np.eye(len(t))
    else:
        occ = np.asarray(occasions)
        same = (occ[:, None] == occ[None, :]).astype(float)
    return c + params.sigma3_sq * same


def cross_covariance(times_a, times_b, params: CovarianceParams) -> np.ndarray:
    """Covariance between values at distinct occasions (no white-noise share)."""
    a = np.asarray(times_a, dtype=float)
    b = np.asarray(times_b, dtype=float)
    d = np.abs(a[:, None] - b[None, :])
    return params.sigma1_sq + params.sigma2_sq * np.exp(-params.lambda_decay * d)


@dataclass(frozen=True)
class TrendSpec:
    """Rule mapping (arm, time) to a regression row.

    ``arm_linear``: separate intercept and slope per arm, in calendar time.
    ``revival_dead``: intercept, arm, u, log(u + epsilon), death time; u is the
    time before death.
    ``revival_survivor``: as ``revival_dead`` without the death-time column; u is
    the time before the observation limit.
    """

    kind: str = "arm_linear"
    epsilon: float = DEFAULT_EPSILON

    KINDS = ("arm_linear", "revival_dead", "revival_survivor")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise DataError(f"unknown trend kind {self.kind!r}")
        if not self.epsilon > 0:
            raise DataError("epsilon must be positive")

    @property
    def names(self) -> tuple[str, ...]:
        if self.kind == "arm_linear":
            return ("placebo_intercept", "placebo_slope", "treated_intercept", "treated_slope")
        base = ("intercept", "arm", "u", "log_u_eps")
        return base + ("death_time",) if self.kind == "revival_dead" else base

    def design(self, arm: int, times, death_time=None) -> np.ndarray:
        t = np.asarray(times, dtype=float)
        one = np.ones_like(t)
        if self.kind == "arm_linear":
            a = float(arm)
            return np.column_stack([(1 - a) * one, (1 - a) * t, a * one, a * t])
        cols = [one, float(arm) * one, t, np.log(t + self.epsilon)]
        if self.kind == "revival_dead":
            if death_time is None:
                raise DataError("revival_dead design needs a death time")
            cols.append(np.broadcast_to(np.asarray(death_time, dtype=float), t.shape))
        return np.column_stack(cols)


@dataclass(frozen=True)
class FittedLongitudinal:
    trend: TrendSpec
    coef: np.ndarray
    cov: CovarianceParams
    loglik: float
    n_obs: int
    n_subjects: int
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        coef = np.array(self.coef, dtype=float)
        coef.setflags(write=False)
        object.__setattr__(self, "coef", coef)
        if not math.isfinite(self.loglik):
            raise NumericalError("fitted log-likelihood is not finite")

    @property
    def coefficients(self) -> dict[str, float]:
        return dict(zip(self.trend.names, (float(c) for c in self.coef)))

    def mean(self, arm: int, times, death_time=None) -> np.ndarray:
        return self.trend.design(arm, times, death_time) @ self.coef

    def to_dict(self) -> dict:
        return {
            "trend": {"kind": self.trend.kind, "epsilon": self.trend.epsilon},
            "coefficients": self.coefficients,
            "covariance": self.cov.to_dict(),
            "loglik": self.loglik,
            "n_obs": self.n_obs,
            "n_subjects": self.n_subjects,
            "meta": self.meta,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FittedLongitudinal":
        trend = TrendSpec(d["trend"]["kind"], d["trend"]["epsilon"])
        coef = [d["coefficients"][n] for n in trend.names]
        return cls(trend, np.array(coef), CovarianceParams(**d["covariance"]),
                   float(d["loglik"]), int(d["n_obs"]), int(d["n_subjects"]), dict(d.get("meta", {})))


@dataclass(frozen=True)
class CovariatePath:
    """Predictable covariate values on an ascending grid after landmark ``s``."""

    s: float
    times: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        t = np.array(self.times, dtype=float).reshape(-1)
        v = np.array(self.values, dtype=float).reshape(-1)
        if t.shape != v.shape:
            raise DataError("path times and values differ in length")
        if t.size > 1 and np.any(np.diff(t) <= 0):
            raise DataError("path times must be strictly ascending")
        if not np.all(np.isfinite(v)):
            raise NumericalError("path values must be finite")
        t.setflags(write=False)
        v.setflags(write=False)
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "values", v)

    @classmethod
    def constant(cls, s: float, times, value: float) -> "CovariatePath":
        t = np.asarray(times, dtype=float)
        return cls(s, t, np.full(t.shape, float(value)))

    def at(self, times) -> np.ndarray:
        """Values at grid times; every requested time must lie on the grid."""
        q = np.asarray(times, dtype=float)
        idx = np.searchsorted(self.times, q)
        ok = idx < self.times.size
        ok[ok] = np.abs(self.times[idx[ok]] - q[ok]) <= 1e-12 * np.maximum(1.0, np.abs(q[ok]))
        if not np.all(ok):
            raise DataError(f"path has no value at times {q[~ok][:5].tolist()}")
        return self.values[idx]


@dataclass(frozen=True)
class FitOptions:
    """Optimizer settings for :func:`fit_gp` and the revival fits.

    ``start`` overrides the method-of-moments starting point (warm start).
    """

    restarts: int = 3
    rtol: float = 1e-8
    maxiter: int = 4000
    seed: int = 0
    perturb_sd: float = 0.5
    exclude_baseline: bool = True
    start: CovarianceParams | None = None


def _chol(v: np.ndarray, scale: float):
    try:
        return np.linalg.cholesky(v)
    except np.linalg.LinAlgError:
        n = v.shape[-1]
        return np.linalg.cholesky(v + JITTER * scale * np.eye(n))


class _Blocks:
    """Per-subject (y, X, times) blocks stacked by block size for batched algebra."""

    def __init__(self, blocks: Sequence[tuple[str, np.ndarray, np.ndarray, np.ndarray]]):
        by_size = defaultdict(list)
        for b in blocks:
            by_size[len(b[1])].append(b)
        self.groups = []
        for n in sorted(by_size):
            bs = by_size[n]
            t = np.stack([b[1] for b in bs])
            self.groups.append({
                "ids": [b[0] for b in bs],
                "dist": np.abs(t[:, :, None] - t[:, None, :]),
                "y": np.stack([b[2] for b in bs])[..., None],
                "X": np.stack([b[3] for b in bs]),
                "eye": np.eye(n),
            })
        self.n_obs = sum(len(b[1]) for b in blocks)
        self.n_subjects = len(blocks)
        self.p = blocks[0][3].shape[1]
        y = np.concatenate([b[2] for b in blocks])
        X = np.concatenate([b[3] for b in blocks])
        self.y_all, self.X_all = y, X

    def profile(self, params: CovarianceParams) -> tuple[float, np.ndarray]:
        """Log-likelihood maximized over the trend, and the GLS trend estimate."""
        s1, s2, lam, s3 = params.as_tuple()
        scale = max(params.total, 1e-300)
        xtx = np.zeros((self.p, self.p))
        xty = np.zeros(self.p)
        pieces = []
        logdet = 0.0
        for g in self.groups:
            v = s1 + s2 * np.exp(-lam * g["dist"]) + s3 * g["eye"]
            try:
                L = _chol(v, scale)
            except np.linalg.LinAlgError:
                bad = _first_failure(v, scale, g["ids"])
                raise NumericalError(f"covariance not positive definite for subject {bad}", bad) from None
            xw = np.linalg.solve(L, g["X"])
            yw = np.linalg.solve(L, g["y"])
            logdet += 2.0 * np.log(np.diagonal(L, axis1=1, axis2=2)).sum()
            xtx += np.einsum("kni,knj->ij", xw, xw)
            xty += np.einsum("kni,kn->i", xw, yw[..., 0])
            pieces.append((xw, yw[..., 0]))
        try:
            beta = linalg.solve(xtx, xty, assume_a="pos")
        except (linalg.LinAlgError, ValueError):
            raise DataError("trend design is rank deficient") from None
        quad = 0.0
        for xw, yw in pieces:
            r = yw - xw @ beta
            quad += float(np.sum(r * r))
        ll = -0.5 * (self.n_obs * LOG_2PI + logdet + quad)
        return ll, beta


def _first_failure(v: np.ndarray, scale: float, ids: list[str]) -> str:
    for k, sid in enumerate(ids):
        try:
            _chol(v[k], scale)
        except np.linalg.LinAlgError:
            return sid
    return ids[0]


def _gp_blocks(subjects: Iterable[Subject], trend: TrendSpec, exclude_baseline: bool):
    blocks = []
    for sub in subjects:
        ms = [m for m in sub.measurements if not (exclude_baseline and m.time == 0)]
        if not ms:
            continue
        t = np.array([m.time for m in ms])
        y = np.array([m.value for m in ms])
        blocks.append((sub.id, t, y, trend.design(sub.arm, t)))
    return blocks


def gaussian_loglik(subjects: Iterable[Subject], trend, params: CovarianceParams,
                    trend_spec: TrendSpec | None = None, exclude_baseline: bool = False) -> float:
    """Marginal Gaussian log-likelihood, independent across subjects.

    ``trend`` is either a :class:`FittedLongitudinal` (its trend and coefficients
    are used) or a coefficient vector for ``trend_spec``.
    """
    if isinstance(trend, FittedLongitudinal):
        spec, coef = trend.trend, trend.coef
    else:
        spec, coef = trend_spec or TrendSpec(), np.asarray(trend, dtype=float)
    total = 0.0
    scale = max(params.total, 1e-300)
    for sid, t, y, X in _gp_blocks(subjects, spec, exclude_baseline):
        v = covariance_matrix(t, params)
        try:
            L = _chol(v, scale)
        except np.linalg.LinAlgError:
            raise NumericalError(f"covariance not positive definite for subject {sid}", sid) from None
        r = linalg.solve_triangular(L, y - X @ coef, lower=True)
        total += -0.5 * (len(y) * LOG_2PI + 2.0 * np.log(np.diag(L)).sum() + r @ r)
    return float(total)


def _moment_start(blocks: _Blocks) -> CovarianceParams:
    beta, *_ = np.linalg.lstsq(blocks.X_all, blocks.y_all, rcond=None)
    r = blocks.y_all - blocks.X_all @ beta
    v = float(np.mean(r * r))
    if not v > 0:
        v = max(float(np.var(blocks.y_all)), 1.0) * 1e-6
    return CovarianceParams(v / 3, v / 3, 1.0, v / 3)


def _log_bounds(blocks: _Blocks) -> list[tuple[float, float]]:
    v = float(np.var(blocks.y_all))
    v = v if v > 0 else 1.0
    var_b = (math.log(v * 1e-12), math.log(v * 1e4))
    return [var_b, var_b, (math.log(1e-6), math.log(1e6)), var_b]


def _minimize(objective, x0: np.ndarray, bounds, options: FitOptions):
    """Nelder-Mead on log-parameters with restarts from perturbed best points."""
    rng = np.random.default_rng(options.seed)
    lo = np.array([b[0] for b in bounds])
    hi = np.array([b[1] for b in bounds])

    def run(start):
        start = np.clip(start, lo, hi)
        simplex = np.vstack([start] + [np.clip(start + 0.5 * e, lo, hi) for e in np.eye(len(start))])
        f0 = objective(start)
        fatol = options.rtol * max(1.0, abs(f0)) if math.isfinite(f0) else options.rtol
        return optimize.minimize(
            objective, start, method="Nelder-Mead", bounds=bounds,
            options={"initial_simplex": simplex, "xatol": 1e-6, "fatol": fatol,
                     "maxiter": options.maxiter, "maxfev": 2 * options.maxiter},
        )

    best = run(np.asarray(x0, dtype=float))
    n_evals = best.nfev
    converged = bool(best.success)
    for _ in range(options.restarts):
        cand = run(best.x + rng.normal(0.0, options.perturb_sd, size=best.x.shape))
        n_evals += cand.nfev
        converged = converged or bool(cand.success)
        if cand.fun < best.fun:
            best = cand
    if best.success is False and not converged:
        raise ConvergenceError(
            f"Nelder-Mead did not converge within {options.maxiter} iterations",
            last_iterate=best.x, diagnostics={"fun": float(best.fun), "nfev": n_evals,
                                              "message": str(best.message)},
        )
    return best, n_evals


def _penalized(blocks_list: Sequence[_Blocks], unpack):
    def objective(theta):
        total = 0.0
        try:
            for blocks, params in zip(blocks_list, unpack(theta)):
                total += blocks.profile(params)[0]
        except (NumericalError, DataError):
            return 1e300
        return -total if math.isfinite(total) else 1e300
    return objective


def fit_blocks(blocks_list: Sequence[_Blocks], trends: Sequence[TrendSpec],
               options: FitOptions, starts: Sequence[CovarianceParams | None] = (),
               shared_noise: bool = False) -> list[FittedLongitudinal]:
    """Jointly maximize independent block likelihoods, optionally sharing sigma3_sq."""
    m = len(blocks_list)
    starts = list(starts) + [None] * (m - len(starts))
    x0 = [(st or _moment_start(b)).to_log() for b, st in zip(blocks_list, starts)]
    bnds = [_log_bounds(b) for b in blocks_list]
    if shared_noise:
        x0_vec = np.concatenate([x[:3] for x in x0] + [[np.mean([x[3] for x in x0])]])
        bounds = [bd for b in bnds for bd in b[:3]] + [bnds[0][3]]

        def unpack(theta):
            return [CovarianceParams.from_log(np.append(theta[3 * j:3 * j + 3], theta[-1])) for j in range(m)]
    else:
        x0_vec = np.concatenate(x0)
        bounds = [bd for b in bnds for bd in b]

        def unpack(theta):
            return [CovarianceParams.from_log(theta[4 * j:4 * j + 4]) for j in range(m)]

    objective = _penalized(blocks_list, unpack)
    res, n_evals = _minimize(objective, x0_vec, bounds, options)
    fits = []
    for blocks, trend, params in zip(blocks_list, trends, unpack(res.x)):
        ll, beta = blocks.profile(params)
        fits.append(FittedLongitudinal(
            trend, beta, params, ll, blocks.n_obs, blocks.n_subjects,
            meta={"optimizer": "nelder-mead", "n_evals": int(n_evals), "restarts": options.restarts,
                  "converged": bool(res.success), "shared_noise": shared_noise},
        ))
    return fits


def fit_gp(subjects: Sequence[Subject], trend_spec: TrendSpec | None = None,
           fit_options: FitOptions | None = None) -> FittedLongitudinal:
    """Maximum-likelihood fit of the working Gaussian process."""
    trend_spec = trend_spec or TrendSpec()
    options = fit_options or FitOptions()
    blocks = _gp_blocks(subjects, trend_spec, options.exclude_baseline)
    if sum(1 for b in blocks if len(b[1]) >= 2) < 2:
        raise DataError("need at least two subjects with two or more measurements")
    return fit_blocks([_Blocks(blocks)], [trend_spec], options, [options.start])[0]


def _history_arrays(history) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(history, tuple) and len(history) == 2 and isinstance(history[0], np.ndarray):
        return np.asarray(history[0], float), np.asarray(history[1], float)
    hist = list(history)
    if hist and not isinstance(hist[0], Measurement):
        t, v = zip(*hist)
        return np.asarray(t, float), np.asarray(v, float)
    return np.array([m.time for m in hist], float), np.array([m.value for m in hist], float)


def spd_solve(a: np.ndarray, b: np.ndarray, scale: float, subject_id: str | None = None) -> np.ndarray:
    """Solve ``a x = b`` by Cholesky, retrying once with diagonal jitter."""
    try:
        return linalg.cho_solve(linalg.cho_factor(a, lower=True), b)
    except linalg.LinAlgError:
        pass
    try:
        return linalg.cho_solve(linalg.cho_factor(a + JITTER * scale * np.eye(len(a)), lower=True), b)
    except linalg.LinAlgError:
        raise NumericalError("covariance not positive definite after jitter", subject_id) from None


def _conditional_mean(fit: FittedLongitudinal, t_hist, x_hist, arm, targets) -> np.ndarray:
    cov = fit.cov
    resid = x_hist - fit.mean(arm, t_hist)
    alpha = spd_solve(covariance_matrix(t_hist, cov), resid, max(cov.total, 1e-300))
    return fit.mean(arm, targets) + cross_covariance(targets, t_hist, cov) @ alpha


def conditional_path(fit: FittedLongitudinal, history, arm: int, target_times,
                     s: float | None = None) -> CovariatePath:
    """Expected marker at ``target_times`` given the history (kriging predictor).

    Targets are treated as new occasions, so they share no white noise with the
    observed history. ``s`` defaults to the last history time.
    """
    t_hist, x_hist = _history_arrays(history)
    if t_hist.size == 0:
        raise DataError("conditional_path needs a non-empty history")
    s = float(t_hist.max()) if s is None else float(s)
    targets = np.asarray(target_times, dtype=float).reshape(-1)
    if targets.size and np.any(targets <= s):
        raise DataError("target times must be after the landmark time")
    values = _conditional_mean(fit, t_hist, x_hist, arm, targets) if targets.size else targets
    return CovariatePath(s, targets, values)


def blup_at_s(fit: FittedLongitudinal, history, arm: int, s: float) -> float:
    """Predicted underlying marker value at the landmark time itself."""
    t_hist, x_hist = _history_arrays(history)
    if t_hist.size == 0:
        raise DataError("blup_at_s needs a non-empty history")
    return float(_conditional_mean(fit, t_hist, x_hist, arm, np.array([float(s)]))[0])

