"""Synthetic joint longitudinal/survival data and brute-force reference routines.

Each subject draws from its own random streams keyed by (seed, subject index,
stream), so a subject's data do not depend on how many others are simulated or
in which order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import mpmath
import numpy as np

from .data import Measurement, Subject
from .errors import ConfigError
from .gp import CovarianceParams

_ARM, _INTERCEPT, _SERIAL, _EVENT, _CENSOR, _NOISE, _VISITS = range(7)

CSL_LIKE_SCHEDULE = (0.0, 0.25, 0.5, 0.75, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0)


@dataclass(frozen=True)
class SimConfig:
    """Generative settings.

    ``trend`` holds (intercept, slope) pairs for arm 0 and arm 1. The hazard is
    ``baseline_hazard * exp(beta * X(t))`` on the true (noise-free) marker.
    Observation times come from ``schedule``, or from a Poisson process with
    ``visit_rate`` per year when that is set. Follow-up ends at ``max_time``.
    """

    n_subjects: int = 500
    trend: tuple[tuple[float, float], tuple[float, float]] = ((69.03, 2.19), (80.57, 1.03))
    cov: CovarianceParams = field(default_factory=lambda: CovarianceParams(308.4, 240.8, 0.52, 184.3))
    schedule: tuple[float, ...] = CSL_LIKE_SCHEDULE
    visit_rate: float | None = None
    max_time: float = 10.0
    baseline_hazard: float = 0.0
    beta: float = 0.0
    censoring_rate: float = 0.0
    p_treated: float = 0.5
    dt: float = 0.01
    seed: int = 0

    def validate(self) -> None:
        bad = []
        if self.n_subjects < 1:
            bad.append("n_subjects must be >= 1")
        for name in ("baseline_hazard", "censoring_rate", "max_time", "dt"):
            if not getattr(self, name) >= 0:
                bad.append(f"{name} must be >= 0")
        if not self.dt > 0:
            bad.append("dt must be > 0")
        if self.visit_rate is not None and not self.visit_rate > 0:
            bad.append("visit_rate must be > 0")
        if not 0 <= self.p_treated <= 1:
            bad.append("p_treated must be in [0, 1]")
        if any(t < 0 for t in self.schedule):
            bad.append("schedule times must be >= 0")
        if self.seed is None:
            bad.append("seed is required")
        if bad:
            raise ConfigError(bad)


def _rng(seed: int, index: int, stream: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(index), int(stream)])


def _serial_path(grid: np.ndarray, sigma2_sq: float, lam: float, rng) -> np.ndarray:
    """Stationary exponential-autocorrelation process sampled exactly on ``grid``."""
    out = np.empty(grid.size)
    z = rng.standard_normal(grid.size)
    sd = math.sqrt(sigma2_sq)
    out[0] = sd * z[0]
    rho = np.exp(-lam * np.diff(grid))
    innov = sd * np.sqrt(1.0 - rho * rho) * z[1:]
    for k in range(1, grid.size):
        out[k] = rho[k - 1] * out[k - 1] + innov[k - 1]
    return out


def simulate_subject(config: SimConfig, index: int) -> Subject:
    seed = config.seed
    arm = int(_rng(seed, index, _ARM).random() < config.p_treated)
    a0, a1 = config.trend[arm]
    cov = config.cov

    if config.visit_rate is not None:
        rv = _rng(seed, index, _VISITS)
        n = rv.poisson(config.visit_rate * config.max_time)
        visits = np.concatenate([[0.0], np.sort(rv.uniform(0.0, config.max_time, n))])
    else:
        visits = np.asarray(config.schedule, dtype=float)
    visits = visits[visits <= config.max_time]

    grid = np.union1d(np.arange(0.0, config.max_time + config.dt / 2, config.dt), visits)
    b = math.sqrt(cov.sigma1_sq) * _rng(seed, index, _INTERCEPT).standard_normal()
    serial = _serial_path(grid, cov.sigma2_sq, cov.lambda_decay, _rng(seed, index, _SERIAL))
    x_true = a0 + a1 * grid + b + serial

    t_event = math.inf
    if config.baseline_hazard > 0:
        rate = config.baseline_hazard * np.exp(config.beta * x_true[:-1])
        cum = np.concatenate([[0.0], np.cumsum(rate * np.diff(grid))])
        target = _rng(seed, index, _EVENT).exponential()
        k = int(np.searchsorted(cum, target, side="right")) - 1
        if k < grid.size - 1:
            t_event = float(grid[k] + (target - cum[k]) / rate[k])
    t_cens = math.inf
    if config.censoring_rate > 0:
        t_cens = float(_rng(seed, index, _CENSOR).exponential(1.0 / config.censoring_rate))
    t_obs = min(t_event, t_cens, config.max_time)
    status = int(t_event <= min(t_cens, config.max_time))

    noise_rng = _rng(seed, index, _NOISE)
    idx = np.searchsorted(grid, visits)
    noise = math.sqrt(cov.sigma3_sq) * noise_rng.standard_normal(visits.size)
    ms = tuple(
        Measurement(float(t), float(x_true[i] + e), k + 1)
        for k, (t, i, e) in enumerate(zip(visits, idx, noise))
        if t < t_obs
    )
    return Subject(f"s{index:05d}", arm, float(t_obs), status, ms)


def simulate(config: SimConfig) -> list[Subject]:
    config.validate()
    return [simulate_subject(config, i) for i in range(config.n_subjects)]


def bruteforce_conditional_mean(joint_mean, joint_cov, observed_idx: Sequence[int], observed_values) -> np.ndarray:
    """Conditional mean of the unobserved entries from the full precision matrix."""
    mu = np.asarray(joint_mean, dtype=float)
    n = mu.size
    obs = np.asarray(observed_idx, dtype=int)
    free = np.setdiff1d(np.arange(n), obs)
    if obs.size == 0:
        return mu.copy()
    prec = np.linalg.inv(np.asarray(joint_cov, dtype=float))
    q_ff = prec[np.ix_(free, free)]
    q_fo = prec[np.ix_(free, obs)]
    dev = np.asarray(observed_values, dtype=float) - mu[obs]
    return mu[free] - np.linalg.solve(q_ff, q_fo @ dev)


def bruteforce_bayes(log_densities, prior_masses, dps: int = 50) -> np.ndarray:
    """Posterior masses by direct normalization at ``dps`` decimal digits."""
    with mpmath.workdps(dps):
        w = [mpmath.exp(mpmath.mpf(float(ld))) * mpmath.mpf(float(p))
             for ld, p in zip(log_densities, prior_masses)]
        total = mpmath.fsum(w)
        return np.array([float(x / total) for x in w])
