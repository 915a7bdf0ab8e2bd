"""Reverse-time ("revival") marker models and the predictions built on them.

Dead subjects are modelled backwards from their death time, survivors backwards
from the observation limit ``tau``. Combined with a Kaplan-Meier prior over the
death time, Bayes' rule gives the posterior over death hypotheses, from which
both a direct survival prediction and a predictable covariate path follow.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.special import logsumexp

from .data import Subject
from .errors import DataError, NumericalError
from .gp import (
    DEFAULT_EPSILON,
    LOG_2PI,
    CovariatePath,
    FitOptions,
    FittedLongitudinal,
    TrendSpec,
    _Blocks,
    _history_arrays,
    covariance_matrix,
    cross_covariance,
    fit_blocks,
)
from .survival import kaplan_meier

DEAD, SURVIVOR = "dead", "survivor"


@dataclass(frozen=True)
class RevivalModel:
    tau: float
    epsilon: float
    dead: FittedLongitudinal
    survivor: FittedLongitudinal

    def __post_init__(self):
        if not (self.tau > 0 and self.epsilon > 0):
            raise DataError("tau and epsilon must be positive")

    def to_dict(self) -> dict:
        return {"tau": self.tau, "epsilon": self.epsilon,
                "dead": self.dead.to_dict(), "survivor": self.survivor.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> "RevivalModel":
        return cls(float(d["tau"]), float(d["epsilon"]),
                   FittedLongitudinal.from_dict(d["dead"]), FittedLongitudinal.from_dict(d["survivor"]))


@dataclass(frozen=True)
class MarginalSurvival:
    """Death-time distribution given survival past ``s``; survivor mass sits at ``tau``."""

    s: float
    tau: float
    support: np.ndarray
    masses: np.ndarray

    def __post_init__(self):
        sup = np.array(self.support, dtype=float)
        m = np.array(self.masses, dtype=float)
        if sup.shape != m.shape or sup.size == 0 or sup[-1] != self.tau:
            raise DataError("support must end with tau and match masses")
        if np.any(m < 0) or abs(m.sum() - 1.0) > 1e-9:
            raise DataError("masses must be non-negative and sum to 1")
        sup.setflags(write=False)
        m.setflags(write=False)
        object.__setattr__(self, "support", sup)
        object.__setattr__(self, "masses", m)

    @property
    def death_support(self) -> np.ndarray:
        return self.support[:-1]

    def to_dict(self) -> dict:
        return {"s": self.s, "tau": self.tau, "support": self.support.tolist(),
                "masses": self.masses.tolist()}


def stratify(subjects: Sequence[Subject], tau: float):
    """Split into (dead by tau, alive at tau, censored before tau)."""
    if not tau > 0:
        raise DataError("tau must be positive")
    dead, surv, early = [], [], []
    for sub in subjects:
        if sub.status == 1 and sub.event_time <= tau:
            dead.append(sub)
        elif sub.event_time >= tau:
            surv.append(sub)
        else:
            early.append(sub)
    if not dead or not surv:
        raise DataError(f"revival needs both strata non-empty (dead={len(dead)}, survivors={len(surv)})")
    return dead, surv, early


def reverse_time(subject: Subject, stratum: str, tau: float, exclude_baseline: bool = False):
    """Measurements as (u, value, occasion) in reversed time; negative u dropped."""
    anchor = subject.event_time if stratum == DEAD else tau
    out = []
    for m in subject.measurements:
        if exclude_baseline and m.time == 0:
            continue
        u = anchor - m.time
        if u >= 0:
            out.append((u, m.value, m.occasion_id))
    return out


def _revival_blocks(subjects, stratum, tau, trend: TrendSpec, exclude_baseline):
    blocks = []
    for sub in subjects:
        rows = reverse_time(sub, stratum, tau, exclude_baseline)
        if not rows:
            continue
        u = np.array([r[0] for r in rows])
        y = np.array([r[1] for r in rows])
        X = trend.design(sub.arm, u, sub.event_time if stratum == DEAD else None)
        blocks.append((sub.id, u, y, X))
    if not blocks:
        raise DataError(f"{stratum} stratum has no usable measurements")
    return _Blocks(blocks)


def fit_revival(subjects: Sequence[Subject], tau: float, epsilon: float = DEFAULT_EPSILON,
                fit_options: FitOptions | None = None, shared_noise: bool = False,
                starts: Sequence | None = None) -> RevivalModel:
    """Fit the dead and survivor reverse-time models.

    ``starts`` optionally gives warm-start covariance parameters (dead, survivor).
    """
    options = fit_options or FitOptions()
    dead, surv, _ = stratify(subjects, tau)
    specs = [TrendSpec("revival_dead", epsilon), TrendSpec("revival_survivor", epsilon)]
    blocks = [_revival_blocks(dead, DEAD, tau, specs[0], options.exclude_baseline),
              _revival_blocks(surv, SURVIVOR, tau, specs[1], options.exclude_baseline)]
    fits = fit_blocks(blocks, specs, options, list(starts or ()), shared_noise=shared_noise)
    return RevivalModel(float(tau), float(epsilon), fits[0], fits[1])


def marginal_survival(subjects: Sequence[Subject], s: float, tau: float, per_arm: bool = True):
    """Kaplan-Meier death-time distribution conditional on survival past ``s``.

    Mass beyond ``tau`` (including deaths after it) is lumped at ``tau``.
    Returns a dict keyed by arm when ``per_arm`` is set.
    """
    if per_arm:
        out = {}
        for arm in (0, 1):
            group = [sub for sub in subjects if sub.arm == arm]
            if group:
                out[arm] = marginal_survival(group, s, tau, per_arm=False)
        return out
    t = np.array([sub.event_time for sub in subjects])
    d = np.array([sub.status for sub in subjects])
    km = kaplan_meier(t, d)
    s_s = km(s)
    if not s_s > 0:
        raise DataError(f"Kaplan-Meier survival is zero at s={s}")
    sel = (km.times > s) & (km.times < tau)
    u = km.times[sel]
    mass = (km.left(u) - km(u)) / s_s
    rest = km.left(tau) / s_s
    masses = np.append(mass, rest)
    masses = masses / masses.sum()
    return MarginalSurvival(float(s), float(tau), np.append(u, tau), masses)


def marginal_for(marginal, arm: int) -> MarginalSurvival:
    if isinstance(marginal, MarginalSurvival):
        return marginal
    try:
        return marginal[arm]
    except KeyError:
        raise DataError(f"no marginal survival estimate for arm {arm}") from None


class _StratumTerms:
    """MVN pieces of one history under every hypothesis of one stratum.

    The history covariance depends only on gaps between history times, so it is
    shared by all anchors; only the mean moves with the hypothesized anchor.
    """

    def __init__(self, fit: FittedLongitudinal, t_hist, x_hist, arm, anchors, dead: bool):
        self.fit, self.arm, self.dead = fit, arm, dead
        self.t_hist = t_hist
        self.anchors = np.asarray(anchors, dtype=float)
        cov = fit.cov
        sigma = covariance_matrix(t_hist, cov)
        try:
            L = np.linalg.cholesky(sigma)
        except np.linalg.LinAlgError:
            try:
                L = np.linalg.cholesky(sigma + 1e-8 * cov.total * np.eye(len(t_hist)))
            except np.linalg.LinAlgError:
                raise NumericalError("revival history covariance not positive definite") from None
        self.L = L
        self.logdet = 2.0 * np.log(np.diag(L)).sum()
        u = self.anchors[:, None] - t_hist[None, :]
        resid = x_hist[None, :] - self._mean(u)
        z = np.linalg.solve(L, resid.T)
        self.logdens = -0.5 * (t_hist.size * LOG_2PI + self.logdet + np.sum(z * z, axis=0))
        self.alpha = np.linalg.solve(L.T, z).T

    def _mean(self, u: np.ndarray) -> np.ndarray:
        spec, coef = self.fit.trend, self.fit.coef
        one = np.ones_like(u)
        m = coef[0] * one + coef[1] * float(self.arm) + coef[2] * u + coef[3] * np.log(u + spec.epsilon)
        if self.dead:
            m = m + coef[4] * self.anchors[:, None] * one
        return m

    def conditional_means(self, targets: np.ndarray) -> np.ndarray:
        """E[X(t) | anchor, history] for each (anchor, target); nan where t > anchor."""
        u = self.anchors[:, None] - targets[None, :]
        ok = u >= 0
        mu = self._mean(np.where(ok, u, 0.0))
        k = cross_covariance(targets, self.t_hist, self.fit.cov)
        out = mu + self.alpha @ k.T
        return np.where(ok, out, np.nan)


def _check_history(history, s=None):
    t_hist, x_hist = _history_arrays(history)
    if t_hist.size == 0:
        raise DataError("revival prediction needs a non-empty history")
    if s is not None and np.any(t_hist > s):
        raise DataError("history contains measurements after s")
    return t_hist, x_hist


def history_logdensity(model: RevivalModel, history, arm: int, death_time: float | None = None) -> float:
    """Log-density of the history given death at ``death_time`` (None: alive at tau)."""
    t_hist, x_hist = _check_history(history)
    if death_time is None:
        terms = _StratumTerms(model.survivor, t_hist, x_hist, arm, [model.tau], dead=False)
    else:
        if death_time < t_hist.max():
            raise DataError("hypothesized death time precedes the history")
        terms = _StratumTerms(model.dead, t_hist, x_hist, arm, [death_time], dead=True)
    return float(terms.logdens[0])


def _support_terms(model: RevivalModel, marg: MarginalSurvival, t_hist, x_hist, arm):
    dead = _StratumTerms(model.dead, t_hist, x_hist, arm, marg.death_support, dead=True)
    surv = _StratumTerms(model.survivor, t_hist, x_hist, arm, [model.tau], dead=False)
    return dead, surv


def _log_weights(logdens, prior) -> np.ndarray:
    """Unnormalized log posterior, shifted so the largest log-density is 0.

    Shifting before adding the log prior keeps it from being rounded away when
    the log-densities are large in magnitude.
    """
    logd = np.asarray(logdens, float)
    finite = logd[np.isfinite(logd)]
    shift = finite.max() if finite.size else 0.0
    with np.errstate(divide="ignore"):
        return (logd - shift) + np.log(np.asarray(prior, float))


def normalize_log_posterior(logdens: np.ndarray, prior: np.ndarray) -> np.ndarray:
    """Posterior masses proportional to exp(logdens) * prior, via log-sum-exp."""
    logw = _log_weights(logdens, prior)
    norm = logsumexp(logw)
    if not np.isfinite(norm):
        raise NumericalError("all posterior masses underflow")
    return np.exp(logw - norm)


def revival_posterior(model, marginal, history, arm, s):
    """Posterior over the support given survival past ``s`` and the history."""
    marg = marginal_for(marginal, arm)
    t_hist, x_hist = _check_history(history, s)
    dead, surv = _support_terms(model, marg, t_hist, x_hist, arm)
    logdens = np.append(dead.logdens, surv.logdens)
    return marg.support, normalize_log_posterior(logdens, marg.masses)


def direct_revival_predict(model: RevivalModel, marginal, history, arm: int, s: float, w: float) -> float:
    """Posterior probability of surviving past ``s + w``."""
    if s + w > model.tau:
        raise DataError(f"revival prediction requires s + w <= tau ({s} + {w} > {model.tau})")
    support, post = revival_posterior(model, marginal, history, arm, s)
    return float(np.clip(post[support > s + w].sum(), 0.0, 1.0))


def revival_conditional_path(model: RevivalModel, marginal, history, arm: int, s: float,
                             event_grid, tau: float | None = None) -> CovariatePath:
    """Expected marker at each grid time given survival to it, mixed over death hypotheses."""
    tau = model.tau if tau is None else tau
    grid = np.asarray(event_grid, dtype=float).reshape(-1)
    if grid.size and (np.any(grid <= s) or np.any(grid >= tau)):
        raise DataError("event grid must lie inside (s, tau)")
    marg = marginal_for(marginal, arm)
    t_hist, x_hist = _check_history(history, s)
    if grid.size == 0:
        return CovariatePath(s, grid, grid)
    dead, surv = _support_terms(model, marg, t_hist, x_hist, arm)
    means = np.vstack([dead.conditional_means(grid), surv.conditional_means(grid)])
    logw = _log_weights(np.append(dead.logdens, surv.logdens), marg.masses)
    active = marg.support[:, None] >= grid[None, :]
    logw_g = np.where(active, logw[:, None], -np.inf)
    norm = logsumexp(logw_g, axis=0)
    if not np.all(np.isfinite(norm)):
        raise NumericalError("all posterior masses underflow")
    post = np.exp(logw_g - norm[None, :])
    values = np.sum(np.where(active, post * np.nan_to_num(means), 0.0), axis=0)
    return CovariatePath(s, grid, values)


def posterior_weights_on_grid(model, marginal, history, arm, s, event_grid):
    """Per-grid-time posterior over hypotheses u >= t (columns sum to 1)."""
    grid = np.asarray(event_grid, dtype=float).reshape(-1)
    marg = marginal_for(marginal, arm)
    t_hist, x_hist = _check_history(history, s)
    dead, surv = _support_terms(model, marg, t_hist, x_hist, arm)
    logw = _log_weights(np.append(dead.logdens, surv.logdens), marg.masses)
    active = marg.support[:, None] >= grid[None, :]
    logw_g = np.where(active, logw[:, None], -np.inf)
    return np.exp(logw_g - logsumexp(logw_g, axis=0)[None, :])


def revival_mean_curves(model: RevivalModel, death_times: Sequence[float], arms=(0, 1),
                        n_points: int = 200):
    """Model-based marker means in calendar time for given death times and survivors."""
    rows = []
    for arm in arms:
        for dt in list(death_times) + [None]:
            anchor = model.tau if dt is None else float(dt)
            t = np.linspace(0.0, anchor, n_points)
            u = anchor - t
            fit = model.survivor if dt is None else model.dead
            mean = fit.mean(arm, u, None if dt is None else anchor)
            label = "survivor" if dt is None else f"dead@{dt:g}"
            rows.extend((arm, label, float(a), float(b)) for a, b in zip(t, mean))
    return rows


__all__ = [
    "RevivalModel", "MarginalSurvival", "stratify", "reverse_time", "fit_revival",
    "history_logdensity", "marginal_survival", "direct_revival_predict",
    "revival_conditional_path", "revival_posterior", "normalize_log_posterior",
]
