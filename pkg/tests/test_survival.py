import warnings

import numpy as np
import pytest

from rmstnma.survival import (
    StepFunction,
    Target,
    kaplan_meier,
    nelson_aalen,
    risk_table,
    rmst_nonparametric,
)

# five subjects; the censoring at t=2 is tied with an event
TIME = np.array([1.0, 2.0, 2.0, 3.0, 4.0])
EVENT = np.array([1, 1, 0, 1, 0])


def test_step_function_evaluation():
    f = StepFunction([1.0, 3.0], [0.5, 0.25], 1.0)
    assert f(0.5) == 1.0
    assert f(1.0) == 0.5
    assert f(2.9) == 0.5
    assert f(10.0) == 0.25
    assert f.left_limit(1.0) == 1.0
    assert f.left_limit(3.0) == 0.5
    np.testing.assert_array_equal(f([0.0, 1.0, 3.0]), [1.0, 0.5, 0.25])
    assert f.integrate(4.0) == 1.0 + 2 * 0.5 + 0.25
    assert f.integrate(2.0, lower=0.5) == 0.5 + 0.5


def test_step_function_rejects_unsorted_knots():
    with pytest.raises(ValueError):
        StepFunction([2.0, 1.0], [0.5, 0.2], 1.0)


def test_risk_table_counts_ties_at_risk():
    table = risk_table(TIME, EVENT)
    np.testing.assert_array_equal(table.times, [1, 2, 3])
    np.testing.assert_array_equal(table.failures, [1, 1, 1])
    np.testing.assert_array_equal(table.at_risk, [5, 4, 2])


def test_kaplan_meier_hand_values():
    km = kaplan_meier(TIME, EVENT)
    np.testing.assert_array_equal(km.knots, [1, 2, 3])
    assert km.values == pytest.approx([4 / 5, 4 / 5 * 3 / 4, 4 / 5 * 3 / 4 * 1 / 2], abs=1e-15)
    assert km(0.99) == 1.0


def test_censoring_kaplan_meier_hand_values():
    g = kaplan_meier(TIME, EVENT, target=Target.CENSORING)
    np.testing.assert_array_equal(g.knots, [2, 4])
    assert g.values == pytest.approx([3 / 4, 0.0], abs=1e-15)
    # right-continuous: the drop at 2 applies at 2 itself
    assert g(2.0) == 0.75
    assert g.left_limit(2.0) == 1.0


def test_nelson_aalen_hand_values():
    na = nelson_aalen(TIME, EVENT)
    assert na.values == pytest.approx([1 / 5, 1 / 5 + 1 / 4, 1 / 5 + 1 / 4 + 1 / 2], abs=1e-15)
    assert na(0.5) == 0.0


def test_rmst_hand_values():
    est = rmst_nonparametric(TIME, EVENT, 3.5)
    assert est.rmst == pytest.approx(1 + 0.8 + 0.6 + 0.3 * 0.5, abs=1e-15)
    tails = np.array([0.8 + 0.6 + 0.15, 0.6 + 0.15, 0.15])
    expected = np.sum(tails**2 / np.array([5, 4, 2]) ** 2)
    assert est.variance == pytest.approx(expected, abs=1e-15)
    assert est.se == pytest.approx(np.sqrt(expected), abs=1e-15)


def test_rmst_single_subject():
    est = rmst_nonparametric([2.0], [1], 5.0)
    assert est.rmst == 2.0
    assert est.variance == 0.0  # Y(t)=d at the only event, tail area 0


def test_rmst_warns_when_follow_up_short():
    with pytest.warns(UserWarning, match="before t_star"):
        est = rmst_nonparametric([1.0, 2.0], [1, 0], 5.0)
    assert est.rmst == pytest.approx(1.0 + 0.5 * 4.0)


@pytest.mark.parametrize(
    "time, event",
    [([], []), ([1.0, -1.0], [1, 1]), ([1.0, 2.0], [1, 2]), ([1.0], [1, 0]), ([np.nan], [1])],
)
def test_invalid_inputs(time, event):
    with pytest.raises(ValueError):
        kaplan_meier(time, event)


def test_rmst_rejects_nonpositive_t_star():
    with pytest.raises(ValueError):
        rmst_nonparametric([1.0], [1], 0.0)


def _instances(n_instances=1000, seed=2024):
    rng = np.random.default_rng(seed)
    for _ in range(n_instances):
        n = int(rng.integers(1, 40))
        # rounding creates ties
        time = np.round(rng.exponential(2.0, n), int(rng.integers(0, 3))) + 0.01
        event = rng.binomial(1, rng.uniform(0.2, 1.0), n)
        yield rng, time, event


def test_property_uncensored_mean_identity():
    for rng, time, _ in _instances():
        event = np.ones_like(time, dtype=int)
        t_star = float(rng.uniform(0.05, 1.5) * time.max())
        est = rmst_nonparametric(time, event, t_star)
        assert est.rmst == pytest.approx(np.mean(np.minimum(time, t_star)), rel=1e-12, abs=1e-12)


def test_property_monotonicity():
    for rng, time, event in _instances(seed=7):
        km = kaplan_meier(time, event)
        assert np.all(np.diff(km.values) <= 0)
        assert np.all((km.values >= 0) & (km.values <= 1))
        na = nelson_aalen(time, event)
        assert np.all(np.diff(na.values) >= 0)
        grid = np.sort(rng.uniform(0.01, time.max() * 1.2, 3))
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            areas = [rmst_nonparametric(time, event, t).rmst for t in grid]
        assert np.all(np.diff(areas) >= -1e-12)
        assert all(0 <= a <= t + 1e-12 for a, t in zip(areas, grid))


def test_property_variance_zero_without_events():
    for rng, time, event in _instances(seed=99):
        t_star = float(time.min()) * 0.999
        est = rmst_nonparametric(time, event, t_star)
        assert est.variance == 0.0
        assert est.rmst == pytest.approx(t_star)
        censored = np.zeros_like(event)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            est = rmst_nonparametric(time, censored, float(time.max()))
        assert est.variance == 0.0
