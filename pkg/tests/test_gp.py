import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from landmarking.data import Measurement, Subject
from landmarking.errors import DataError
from landmarking.gp import (
    CovarianceParams,
    FitOptions,
    FittedLongitudinal,
    TrendSpec,
    blup_at_s,
    conditional_path,
    covariance_matrix,
    fit_gp,
    gaussian_loglik,
)
from landmarking.sim import SimConfig, bruteforce_conditional_mean, simulate

from oracles import exp_cov, make_fit

CSL_COV = CovarianceParams(308.4, 240.8, 0.52, 184.3)
TREND = [69.03, 2.19, 80.57, 1.03]


def test_covariance_hand_values():
    c = covariance_matrix([1.0, 3.0], CSL_COV)
    assert c[0, 1] == pytest.approx(308.4 + 240.8 * math.exp(-1.04))
    assert c[0, 1] == pytest.approx(393.5, abs=0.05)
    assert c[0, 0] == c[1, 1] == pytest.approx(733.5)


def test_covariance_pure_intercept():
    c = covariance_matrix([0.0, 1.0, 7.0], CovarianceParams(5.0, 0.0, 1.0, 0.0))
    assert np.all(c == 5.0)


def test_covariance_occasions():
    c = covariance_matrix([2.0, 2.0], CSL_COV, occasions=[1, 2])
    assert c[0, 1] == pytest.approx(308.4 + 240.8)
    assert c[0, 0] == pytest.approx(CSL_COV.total)
    same = covariance_matrix([2.0, 2.0], CSL_COV, occasions=[1, 1])
    assert same[0, 1] == pytest.approx(CSL_COV.total)


def test_params_validation_and_log_roundtrip():
    with pytest.raises(DataError):
        CovarianceParams(-1.0, 1.0, 1.0, 1.0)
    with pytest.raises(DataError):
        CovarianceParams(1.0, 1.0, 0.0, 1.0)
    p = CovarianceParams.from_log(CSL_COV.to_log())
    assert np.allclose(p.as_tuple(), CSL_COV.as_tuple())


def one_subject(ms, arm=0, sid="a"):
    return Subject(sid, arm, 20.0, 0, tuple(Measurement(t, v, k + 1) for k, (t, v) in enumerate(ms)))


def test_loglik_single_observation():
    sub = one_subject([(2.0, 69.03 + 2.19 * 2.0)])
    ll = gaussian_loglik([sub], TREND, CSL_COV)
    assert ll == pytest.approx(-0.5 * math.log(2 * math.pi * CSL_COV.total), rel=1e-12)


def test_loglik_doubles_with_dataset():
    a = one_subject([(0.5, 70.0), (1.5, 81.0), (4.0, 60.0)])
    b = one_subject([(1.0, 90.0)], arm=1, sid="b")
    single = gaussian_loglik([a, b], TREND, CSL_COV)
    doubled = gaussian_loglik([a, b, a, b], TREND, CSL_COV)
    assert doubled == pytest.approx(2 * single, rel=1e-12)


def test_loglik_two_by_two_closed_form():
    t = np.array([1.0, 3.0])
    y = np.array([75.0, 66.0])
    sub = one_subject(list(zip(t, y)), arm=1)
    r = y - (80.57 + 1.03 * t)
    a, c = CSL_COV.total, CSL_COV.sigma1_sq + CSL_COV.sigma2_sq * math.exp(-CSL_COV.lambda_decay * 2.0)
    det = a * a - c * c
    quad = (a * r[0] ** 2 - 2 * c * r[0] * r[1] + a * r[1] ** 2) / det
    expected = -math.log(2 * math.pi) - 0.5 * math.log(det) - 0.5 * quad
    assert gaussian_loglik([sub], TREND, CSL_COV) == pytest.approx(expected, rel=1e-12)


def test_loglik_exclude_baseline():
    sub = one_subject([(0.0, 10.0), (1.0, 71.22)])
    with_base = gaussian_loglik([sub], TREND, CSL_COV)
    without = gaussian_loglik([sub], TREND, CSL_COV, exclude_baseline=True)
    assert without == pytest.approx(-0.5 * math.log(2 * math.pi * CSL_COV.total))
    assert with_base != without


def test_trend_designs():
    spec = TrendSpec("arm_linear")
    assert spec.design(0, [2.0]).tolist() == [[1, 2, 0, 0]]
    assert spec.design(1, [2.0]).tolist() == [[0, 0, 1, 2]]
    dead = TrendSpec("revival_dead", 0.5)
    assert np.allclose(dead.design(1, [1.5], 4.0), [[1, 1, 1.5, math.log(2.0), 4.0]])
    surv = TrendSpec("revival_survivor", 0.5)
    assert surv.design(0, [1.5]).shape == (1, 4)
    assert "death_time" not in surv.names
    with pytest.raises(DataError):
        dead.design(0, [1.0])


def gp_fit(cov=CSL_COV, coef=TREND):
    return make_fit("arm_linear", coef, cov)


def test_conditional_path_on_trend():
    fit = gp_fit()
    hist = [(0.5, 69.03 + 2.19 * 0.5), (2.0, 69.03 + 2.19 * 2.0)]
    path = conditional_path(fit, hist, 0, [3.5, 4.0], s=3.0)
    assert np.allclose(path.values, 69.03 + 2.19 * np.array([3.5, 4.0]))


def test_conditional_path_scalar_closed_form():
    fit = gp_fit()
    x, t0, t1 = 90.0, 2.0, 3.7
    mu1 = 80.57 + 1.03 * t0
    mu2 = 80.57 + 1.03 * t1
    c = 308.4 + 240.8 * math.exp(-0.52 * (t1 - t0))
    expected = mu2 + c * (x - mu1) / CSL_COV.total
    path = conditional_path(fit, [(t0, x)], 1, [t1], s=3.0)
    assert path.values[0] == pytest.approx(expected, rel=1e-12)


def test_conditional_path_decay_limit():
    fit = gp_fit(CovarianceParams(0.0, 240.8, 0.52, 184.3))
    path = conditional_path(fit, [(1.0, 150.0)], 0, [1e4], s=1.0)
    assert path.values[0] == pytest.approx(69.03 + 2.19 * 1e4, abs=1e-9)


def test_conditional_path_rejects_past_targets():
    with pytest.raises(DataError):
        conditional_path(gp_fit(), [(1.0, 70.0)], 0, [2.0, 3.0], s=2.5)
    with pytest.raises(DataError):
        conditional_path(gp_fit(), [], 0, [4.0], s=3.0)


def test_blup_without_noise_interpolates():
    fit = gp_fit(CovarianceParams(308.4, 240.8, 0.52, 0.0))
    assert blup_at_s(fit, [(1.0, 50.0), (3.0, 99.0)], 0, 3.0) == pytest.approx(99.0, rel=1e-9)


def test_blup_shrinkage_factor():
    fit = make_fit("arm_linear", [0, 0, 0, 0], CSL_COV)
    d = 1.3
    factor = (308.4 + 240.8 * math.exp(-0.52 * d)) / CSL_COV.total
    assert blup_at_s(fit, [(1.0, 10.0)], 0, 1.0 + d) == pytest.approx(10.0 * factor, rel=1e-12)


def test_blup_on_trend():
    fit = gp_fit()
    assert blup_at_s(fit, [(1.0, 69.03 + 2.19)], 0, 3.0) == pytest.approx(69.03 + 2.19 * 3.0)


@settings(max_examples=80, deadline=None)
@given(
    st.lists(st.floats(0.0, 5.0), min_size=1, max_size=6, unique=True),
    st.lists(st.floats(5.01, 9.0), min_size=1, max_size=4, unique=True),
    st.floats(1.0, 500.0), st.floats(1.0, 500.0), st.floats(0.05, 3.0), st.floats(1.0, 300.0),
    st.integers(0, 2 ** 32 - 1),
)
def test_conditional_path_matches_precision_oracle(th, tt, s1, s2, lam, s3, seed):
    cov = CovarianceParams(s1, s2, lam, s3)
    fit = gp_fit(cov)
    th, tt = np.array(sorted(th)), np.array(sorted(tt))
    rng = np.random.default_rng(seed)
    x = 70 + 20 * rng.standard_normal(th.size)
    times = np.concatenate([th, tt])
    same = np.zeros((times.size, times.size))
    same[: th.size, : th.size] = np.eye(th.size)
    same[th.size:, th.size:] = np.eye(tt.size)
    joint = exp_cov(times, times, cov, same)
    mean = 69.03 + 2.19 * times
    ref = bruteforce_conditional_mean(mean, joint, np.arange(th.size), x)
    got = conditional_path(fit, (th, x), 0, tt, s=5.0).values
    assert np.allclose(got, ref, rtol=1e-8, atol=1e-8 * np.abs(ref).max())


def test_fitted_roundtrip():
    fit = FittedLongitudinal(TrendSpec("revival_dead", 0.01), np.arange(5.0), CSL_COV, -12.5, 10, 3, {"k": 1})
    back = FittedLongitudinal.from_dict(fit.to_dict())
    assert back.to_dict() == fit.to_dict()
    assert back.coefficients["death_time"] == 4.0


def test_fit_gp_noiseless_data():
    subs = [one_subject([(t, 69.03 + 2.19 * t) for t in (0.5, 1.0, 2.0, 4.0)], sid="a"),
            one_subject([(t, 80.57 + 1.03 * t) for t in (0.5, 1.5, 3.0)], arm=1, sid="b"),
            one_subject([(t, 69.03 + 2.19 * t) for t in (1.0, 2.5)], sid="c")]
    fit = fit_gp(subs, fit_options=FitOptions(restarts=1))
    assert np.allclose(fit.coef, TREND, atol=1e-6)
    var = np.var([m.value for s in subs for m in s.measurements])
    assert fit.cov.sigma1_sq + fit.cov.sigma2_sq + fit.cov.sigma3_sq < 1e-6 * var


def test_fit_gp_needs_repeated_measures():
    subs = [one_subject([(1.0, 70.0)], sid="a"), one_subject([(1.0, 71.0), (2.0, 72.0)], sid="b")]
    with pytest.raises(DataError):
        fit_gp(subs)


def test_fit_gp_recovers_simulated_parameters():
    cfg = SimConfig(n_subjects=600, schedule=(0.25, 1.0, 2.0, 3.0, 5.0, 8.0), seed=11)
    fit = fit_gp(simulate(cfg), fit_options=FitOptions(restarts=1))
    truth = np.array(CSL_COV.as_tuple())
    got = np.array(fit.cov.as_tuple())
    assert np.all(np.abs(got / truth - 1) < [0.3, 0.3, 0.5, 0.2])
    assert np.allclose(fit.coef, TREND, atol=3.0)
    at_truth = gaussian_loglik(simulate(cfg), TREND, CSL_COV, exclude_baseline=True)
    assert fit.loglik >= at_truth


def test_fit_gp_is_deterministic():
    subs = simulate(SimConfig(n_subjects=80, seed=5))
    a = fit_gp(subs, fit_options=FitOptions(restarts=1))
    b = fit_gp(subs, fit_options=FitOptions(restarts=1))
    assert a.cov == b.cov and np.array_equal(a.coef, b.coef)
