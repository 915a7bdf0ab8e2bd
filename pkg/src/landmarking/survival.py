"""Kaplan-Meier estimators and a Breslow Cox model with time-dependent covariates."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .data import LandmarkDataset
from .errors import ConvergenceError, DataError, NumericalError
from .gp import CovariatePath


@dataclass(frozen=True)
class StepFunction:
    """Right-continuous step function: ``initial`` before the first jump time."""

    times: np.ndarray
    values: np.ndarray
    initial: float = 1.0

    def __post_init__(self):
        t = np.array(self.times, dtype=float).reshape(-1)
        v = np.array(self.values, dtype=float).reshape(-1)
        if t.shape != v.shape:
            raise DataError("step function times and values differ in length")
        if t.size > 1 and np.any(np.diff(t) <= 0):
            raise DataError("step function times must be strictly ascending")
        t.setflags(write=False)
        v.setflags(write=False)
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "values", v)

    def __call__(self, t):
        idx = np.searchsorted(self.times, np.asarray(t, dtype=float), side="right") - 1
        out = np.where(idx >= 0, self.values[np.maximum(idx, 0)] if self.values.size else self.initial,
                       self.initial)
        return float(out) if np.ndim(out) == 0 else out

    def left(self, t):
        """Limit from the left, f(t-)."""
        idx = np.searchsorted(self.times, np.asarray(t, dtype=float), side="left") - 1
        out = np.where(idx >= 0, self.values[np.maximum(idx, 0)] if self.values.size else self.initial,
                       self.initial)
        return float(out) if np.ndim(out) == 0 else out

    def to_dict(self) -> dict:
        return {"initial": self.initial, "times": self.times.tolist(), "values": self.values.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "StepFunction":
        return cls(np.array(d["times"]), np.array(d["values"]), float(d["initial"]))


def _product_limit(times: np.ndarray, events: np.ndarray) -> StepFunction:
    uniq, inv = np.unique(times, return_inverse=True)
    d = np.bincount(inv, weights=events, minlength=uniq.size)
    leaving = np.bincount(inv, minlength=uniq.size)
    at_risk = times.size - np.concatenate([[0], np.cumsum(leaving)[:-1]])
    jump = d > 0
    surv = np.cumprod(1.0 - d[jump] / at_risk[jump])
    return StepFunction(uniq[jump], surv, 1.0)


def _check_times(times, statuses):
    t = np.asarray(times, dtype=float).reshape(-1)
    d = np.asarray(statuses).reshape(-1)
    if t.size == 0:
        raise DataError("survival estimator needs at least one observation")
    if t.shape != d.shape:
        raise DataError("times and statuses differ in length")
    if not np.all(np.isfinite(t)) or np.any(t <= 0):
        raise DataError("survival times must be positive and finite")
    if not np.all(np.isin(d, (0, 1))):
        raise DataError("statuses must be 0 or 1")
    return t, d.astype(float)


def kaplan_meier(times, statuses, group=None):
    """Product-limit estimate; returns a dict keyed by group value when ``group`` is given."""
    t, d = _check_times(times, statuses)
    if group is None:
        return _product_limit(t, d)
    g = np.asarray(group).reshape(-1)
    return {k.item() if hasattr(k, "item") else k: _product_limit(t[g == k], d[g == k])
            for k in np.unique(g)}


def reverse_km(times, statuses, group=None):
    """Kaplan-Meier estimate of the censoring distribution."""
    t, d = _check_times(times, statuses)
    return kaplan_meier(t, 1 - d.astype(int), group)


@dataclass(frozen=True)
class RiskSetTable:
    """Long-format risk sets: one row per (death time, subject at risk).

    Rows are grouped by ``row_time`` (an index into ``event_times``) in ascending order.
    """

    event_times: np.ndarray
    row_time: np.ndarray
    row_subject: np.ndarray
    x: np.ndarray
    event: np.ndarray
    subject_ids: tuple[str, ...]
    names: tuple[str, ...] = ("x",)

    @property
    def n_rows(self) -> int:
        return int(self.row_time.size)


def _risk_rows(time: np.ndarray, status: np.ndarray, grid: np.ndarray, value_at, ids, names):
    rows_t, rows_i, rows_x, rows_e = [], [], [], []
    for j, u in enumerate(grid):
        at_risk = np.flatnonzero(time >= u)
        rows_t.append(np.full(at_risk.size, j))
        rows_i.append(at_risk)
        rows_x.append(value_at(j, at_risk))
        rows_e.append((time[at_risk] == u) & (status[at_risk] == 1))
    p = len(names)
    if not rows_t:
        return RiskSetTable(grid, np.zeros(0, int), np.zeros(0, int), np.zeros((0, p)),
                            np.zeros(0, bool), tuple(ids), tuple(names))
    return RiskSetTable(np.asarray(grid, float), np.concatenate(rows_t), np.concatenate(rows_i),
                        np.concatenate(rows_x).reshape(-1, p), np.concatenate(rows_e),
                        tuple(ids), tuple(names))


def expand_counting_process(landmark: LandmarkDataset, paths: Mapping[str, CovariatePath],
                            fixed: Mapping[str, Sequence[float]] | None = None,
                            fixed_names: Sequence[str] = ()) -> RiskSetTable:
    """Risk-set rows carrying each subject's path value at every death time.

    ``fixed`` adds time-constant covariates (for example the treatment arm).
    """
    grid = landmark.event_grid
    ids = landmark.ids
    vals = np.empty((len(ids), grid.size))
    for i, sid in enumerate(ids):
        path = paths[sid]
        if path.times.shape != grid.shape or not np.allclose(path.times, grid, rtol=0, atol=1e-12):
            raise DataError(f"path grid of subject {sid} does not match the landmark event grid")
        vals[i] = path.values
    extra = None
    if fixed is not None:
        extra = np.array([list(fixed[sid]) for sid in ids], dtype=float).reshape(len(ids), -1)

    def value_at(j, idx):
        col = vals[idx, j][:, None]
        return col if extra is None else np.hstack([col, extra[idx]])

    names = ("x",) + tuple(fixed_names) if extra is not None else ("x",)
    if extra is not None and len(names) != 1 + extra.shape[1]:
        names = ("x",) + tuple(f"z{k}" for k in range(extra.shape[1]))
    return _risk_rows(landmark.time, landmark.status, grid, value_at, ids, names)


def time_fixed_table(landmark: LandmarkDataset, covariates, names: Sequence[str] | None = None) -> RiskSetTable:
    """Risk-set rows for time-constant covariates, one row of ``covariates`` per subject."""
    z = np.asarray(covariates, dtype=float)
    z = z.reshape(len(landmark), -1)
    names = tuple(names) if names is not None else tuple(f"z{k}" for k in range(z.shape[1]))
    return _risk_rows(landmark.time, landmark.status, landmark.event_grid,
                      lambda j, idx: z[idx], landmark.ids, names)


@dataclass(frozen=True)
class CoxFit:
    names: tuple[str, ...]
    beta: np.ndarray
    cov_beta: np.ndarray
    event_times: np.ndarray
    increments: np.ndarray
    loglik_null: float
    loglik_final: float
    n_events: int
    n_iter: int = 0
    aliased: tuple[bool, ...] = field(default=())

    @property
    def se(self) -> np.ndarray:
        return np.sqrt(np.diag(self.cov_beta))

    @property
    def wald_chi_sq(self) -> np.ndarray:
        return (self.beta / self.se) ** 2

    @property
    def lr_chi_sq(self) -> float:
        return 2.0 * (self.loglik_final - self.loglik_null)

    def linear_predictor(self, x) -> np.ndarray:
        return np.asarray(x, dtype=float) @ self.beta

    def to_dict(self) -> dict:
        return {
            "coefficients": [
                {"name": n, "beta": float(b), "se": float(s), "wald_chi_sq": float(c)}
                for n, b, s, c in zip(self.names, self.beta, self.se, self.wald_chi_sq)
            ],
            "cov_beta": self.cov_beta.tolist(),
            "baseline": {"times": self.event_times.tolist(), "increments": self.increments.tolist()},
            "loglik_null": self.loglik_null,
            "loglik_final": self.loglik_final,
            "n_events": self.n_events,
        }


def _aliased_columns(x: np.ndarray, tol: float = 1e-10) -> np.ndarray:
    """Flag constant columns and columns linearly dependent on earlier ones."""
    p = x.shape[1]
    xc = x - x.mean(axis=0)
    keep: list[int] = []
    aliased = np.zeros(p, dtype=bool)
    for j in range(p):
        col = xc[:, j]
        norm = np.linalg.norm(col)
        if norm <= tol * max(1.0, np.linalg.norm(x[:, j])):
            aliased[j] = True
            continue
        if keep:
            basis = xc[:, keep]
            coef, *_ = np.linalg.lstsq(basis, col, rcond=None)
            if np.linalg.norm(col - basis @ coef) <= 1e-8 * norm:
                aliased[j] = True
                continue
        keep.append(j)
    return aliased


class _PartialLikelihood:
    def __init__(self, table: RiskSetTable, x: np.ndarray):
        self.x = x
        self.event = table.event.astype(float)
        starts = np.flatnonzero(np.r_[True, np.diff(table.row_time) != 0])
        self.starts = starts
        self.d = np.add.reduceat(self.event, starts)
        self.x_death = self.x[table.event].sum(axis=0)

    def evaluate(self, b: np.ndarray):
        eta = self.x @ b
        shift = np.maximum.reduceat(eta, self.starts)
        w = np.exp(eta - np.repeat(shift, np.diff(np.r_[self.starts, eta.size])))
        s0 = np.add.reduceat(w, self.starts)
        s1 = np.add.reduceat(w[:, None] * self.x, self.starts)
        s2 = np.add.reduceat(w[:, None, None] * self.x[:, :, None] * self.x[:, None, :], self.starts)
        ll = float(eta[self.event == 1].sum() - np.sum(self.d * (np.log(s0) + shift)))
        xbar = s1 / s0[:, None]
        score = self.x_death - (self.d[:, None] * xbar).sum(axis=0)
        info = np.einsum("u,uij->ij", self.d, s2 / s0[:, None, None] - xbar[:, :, None] * xbar[:, None, :])
        return ll, score, info


def fit_cox(table: RiskSetTable, max_iter: int = 100, max_abs_beta: float = 50.0) -> CoxFit:
    """Newton-Raphson on the Breslow partial likelihood.

    Constant or linearly dependent covariate columns are aliased: their
    coefficient is fixed at 0 with undefined (nan) standard error.
    """
    if table.n_rows == 0 or not table.event.any():
        raise DataError("Cox model needs at least one death")
    x = np.asarray(table.x, dtype=float)
    p = x.shape[1]
    aliased = _aliased_columns(x)
    active = np.flatnonzero(~aliased)
    mean = x[:, active].mean(axis=0)
    sd = x[:, active].std(axis=0)
    xs = (x[:, active] - mean) / sd if active.size else np.zeros((x.shape[0], 0))
    pl = _PartialLikelihood(table, xs)

    b = np.zeros(active.size)
    ll, score, info = pl.evaluate(b)
    ll_null = ll
    n_iter = 0
    converged = active.size == 0
    while not converged:
        if n_iter >= max_iter:
            raise ConvergenceError("Cox Newton-Raphson hit the iteration limit", b / sd,
                                   {"score": score.tolist(), "loglik": ll})
        n_iter += 1
        try:
            step = np.linalg.solve(info, score)
        except np.linalg.LinAlgError:
            raise NumericalError("singular information matrix in Cox fit") from None
        halvings = 0
        while True:
            b_new = b + step
            ll_new, score_new, info_new = pl.evaluate(b_new)
            if ll_new >= ll - 1e-12 or halvings >= 30:
                break
            step = step / 2.0
            halvings += 1
        if np.max(np.abs(b_new)) > max_abs_beta or not math.isfinite(ll_new):
            raise ConvergenceError("monotone partial likelihood: coefficient diverges", b_new / sd,
                                   {"loglik": ll_new})
        delta = abs(ll_new - ll)
        b, ll, score, info = b_new, ll_new, score_new, info_new
        converged = delta < 1e-10 and np.max(np.abs(score)) < 1e-8

    if active.size:
        # On a monotone likelihood the score vanishes while Newton steps stay large.
        try:
            last = np.linalg.solve(info, score)
        except np.linalg.LinAlgError:
            last = np.full(active.size, np.inf)
        if np.max(np.abs(last)) > 1e-4:
            raise ConvergenceError("monotone partial likelihood: coefficient diverges", b / sd,
                                   {"loglik": ll, "newton_step": last.tolist()})

    beta = np.zeros(p)
    cov = np.full((p, p), np.nan)
    if active.size:
        beta[active] = b / sd
        try:
            inv = np.linalg.inv(info)
        except np.linalg.LinAlgError:
            raise NumericalError("singular information matrix in Cox fit") from None
        cov[np.ix_(active, active)] = inv / np.outer(sd, sd)
        cov = np.where(np.isnan(cov), np.nan, 0.5 * (cov + cov.T))

    eta = x @ beta
    s0 = np.add.reduceat(np.exp(eta), pl.starts)
    increments = pl.d / s0
    return CoxFit(tuple(table.names), beta, cov, np.asarray(table.event_times, float), increments,
                  float(ll_null), float(ll), int(pl.d.sum()), n_iter, tuple(bool(a) for a in aliased))


def partial_loglik(table: RiskSetTable, beta) -> float:
    """Breslow partial log-likelihood at ``beta`` (original covariate scale)."""
    pl = _PartialLikelihood(table, np.asarray(table.x, dtype=float))
    return pl.evaluate(np.asarray(beta, dtype=float).reshape(-1))[0]


def martingale_residuals(fit: CoxFit, table: RiskSetTable) -> np.ndarray:
    """Per-subject observed minus expected deaths over the risk-set rows."""
    n = len(table.subject_ids)
    expected = fit.increments[table.row_time] * np.exp(table.x @ fit.beta)
    e = np.bincount(table.row_subject, weights=expected, minlength=n)
    o = np.bincount(table.row_subject, weights=table.event.astype(float), minlength=n)
    return o - e


def predict_survival(fit: CoxFit, path: CovariatePath | None, s: float, w: float,
                     fixed: Sequence[float] = ()) -> float:
    """Survival to ``s + w`` from the Breslow increments in (s, s + w]."""
    sel = (fit.event_times > s) & (fit.event_times <= s + w)
    if not sel.any():
        return 1.0
    u = fit.event_times[sel]
    z = np.asarray(fixed, dtype=float).reshape(-1)
    if path is None:
        if z.size != fit.beta.size:
            raise DataError("a covariate path is required for this Cox model")
        lp = np.full(u.size, float(z @ fit.beta))
    else:
        if z.size + 1 != fit.beta.size:
            raise DataError(f"Cox model has {fit.beta.size} covariates, got path plus {z.size}")
        lp = fit.beta[0] * path.at(u) + float(z @ fit.beta[1:])
    return float(np.exp(-np.sum(fit.increments[sel] * np.exp(lp))))
