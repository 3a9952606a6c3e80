import numpy as np
import pytest

from rmstnma.errors import ArmUnidentifiableError, CensoringWeightError, RankDeficientError, RmstNmaError
from rmstnma.ipcw import (
    Link,
    Param,
    arm_design,
    build_weights,
    estimating_equation,
    fit_ipcw_rmst,
    fit_study,
    param_labels,
    sandwich_covariance,
)


def test_param_labels_order():
    labels = param_labels([0, 2], 2)
    assert labels == [Param(0), Param(2), Param(0, 0), Param(0, 1), Param(2, 0), Param(2, 1)]
    assert labels[0].is_intercept and not labels[2].is_intercept


def test_arm_design():
    X = arm_design(np.array([0, 2, 2]), np.array([[1.0], [2.0], [3.0]]), [0, 2])
    np.testing.assert_array_equal(X, [[1, 0, 1, 0], [0, 1, 0, 2], [0, 1, 0, 3]])


def test_links():
    eta = np.array([-1.0, 0.0, 2.0])
    for name in ("log", "identity"):
        lk = Link(name)
        mu = lk.inverse(eta)
        np.testing.assert_allclose(lk(mu), eta)
        h = 1e-6
        np.testing.assert_allclose(lk.inverse_deriv(eta), (lk.inverse(eta + h) - lk.inverse(eta - h)) / (2 * h), rtol=1e-8)
    with pytest.raises(ValueError):
        Link("logit")


def test_build_weights_hand_values():
    y, dstar, w = build_weights([1.0, 2.0, 3.0, 5.0], [1, 0, 1, 0], 4.0)
    np.testing.assert_array_equal(y, [1, 2, 3, 4])
    np.testing.assert_array_equal(dstar, [True, False, True, True])
    np.testing.assert_allclose(w, [1.0, 0.0, 1.5, 1.5], rtol=1e-15)


def test_build_weights_zero_censoring_survival():
    # last subject censored exactly at t*: right-continuous G(4) = 0
    with pytest.raises(CensoringWeightError, match="G=0"):
        build_weights([1.0, 4.0], [1, 0], 4.0)


def test_build_weights_without_censoring_are_one():
    y, dstar, w = build_weights([1.0, 2.0, 6.0], [1, 1, 1], 4.0)
    np.testing.assert_array_equal(w, 1.0)
    np.testing.assert_array_equal(y, [1, 2, 4])


def test_intercept_only_log_link_is_log_weighted_mean(rng):
    y = rng.uniform(0.5, 3, 50)
    w = rng.uniform(0, 2, 50)
    fit = fit_ipcw_rmst(np.ones((50, 1)), y, w, labels=[Param(0)])
    assert fit.converged
    assert fit.coefficients[0] == pytest.approx(np.log(np.average(y, weights=w)), abs=1e-12)


def test_identity_link_matches_weighted_least_squares(rng):
    n = 200
    X = np.column_stack([np.ones(n), rng.normal(size=n)])
    y = 2 + 0.5 * X[:, 1] + rng.normal(size=n)
    w = rng.uniform(0.2, 2.0, n)
    fit = fit_ipcw_rmst(X, y, w, link="identity")
    sw = np.sqrt(w)
    wls = np.linalg.lstsq(X * sw[:, None], y * sw, rcond=None)[0]
    np.testing.assert_allclose(fit.coefficients, wls, atol=1e-10)


def test_score_residual_and_sandwich(rng):
    n = 400
    treatment = rng.integers(0, 2, n)
    x = rng.binomial(1, 0.5, n).astype(float)
    t = np.exp(0.5 + 0.4 * treatment + 0.3 * x + rng.normal(size=n))
    c = rng.exponential(8.0, n)
    fit = fit_study(np.minimum(t, c), (t <= c).astype(int), treatment, x[:, None], 4.0)
    y, _, w = build_weights(np.minimum(t, c), (t <= c).astype(int), 4.0)
    X = arm_design(treatment, x[:, None], [0, 1])
    assert fit.converged
    assert np.max(np.abs(estimating_equation(X, y, w, fit.coefficients))) <= 1e-8
    assert fit.labels == param_labels([0, 1], 1)
    # zero-weight rows contribute to neither bread nor meat, and n cancels
    np.testing.assert_allclose(fit.covariance, sandwich_covariance(X, y, w, fit.coefficients), rtol=1e-10)
    assert np.all(np.linalg.eigvalsh(fit.covariance) > 0)


def test_sandwich_matches_ols_robust_formula(rng):
    n = 100
    X = np.column_stack([np.ones(n), rng.normal(size=n)])
    y = X @ [1.0, 2.0] + rng.normal(size=n)
    beta = np.linalg.lstsq(X, y, rcond=None)[0]
    e = y - X @ beta
    bread = np.linalg.inv(X.T @ X)
    hc0 = bread @ (X.T * e**2) @ X @ bread
    np.testing.assert_allclose(sandwich_covariance(X, y, np.ones(n), beta, "identity"), hc0, rtol=1e-10)


def test_rank_deficiency_names_columns():
    X = np.column_stack([np.ones(6), np.ones(6)])
    with pytest.raises(RankDeficientError, match="collinear"):
        fit_ipcw_rmst(X, np.arange(1.0, 7.0), np.ones(6))


def test_unidentifiable_arm():
    treatment = np.array([0, 0, 1, 1])
    X = arm_design(treatment, np.zeros((4, 0)), [0, 1])
    w = np.array([1.0, 1.0, 0.0, 0.0])
    with pytest.raises(ArmUnidentifiableError):
        fit_ipcw_rmst(X, np.ones(4), w, labels=param_labels([0, 1], 0))


def test_log_link_requires_positive_outcome():
    with pytest.raises(RmstNmaError, match="positive"):
        fit_ipcw_rmst(np.ones((3, 1)), np.array([0.0, 1.0, 2.0]), np.ones(3))


def test_nonconvergence_is_reported(rng):
    y = rng.uniform(0.5, 3, 30)
    X = np.column_stack([np.ones(30), rng.normal(size=30)])
    fit = fit_ipcw_rmst(X, y, np.ones(30), max_iter=0)
    assert not fit.converged
    assert fit.iterations == 0
