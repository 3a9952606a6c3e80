"""Nonparametric survival primitives.

Kaplan-Meier and Nelson-Aalen estimators on right-censored data, plus the
nonparametric restricted mean survival time (RMST) and its variance. Ties are
handled with the usual product-limit convention: every failure at time ``t``
is applied against the risk set ``{i : time_i >= t}``, so subjects censored at
``t`` are still at risk for failures at ``t``.
"""

from __future__ import annotations

import enum
import warnings
from dataclasses import dataclass

import numpy as np


class Target(str, enum.Enum):
    """Which exit process a product-limit estimate describes."""

    EVENT = "event"
    CENSORING = "censoring"


@dataclass(frozen=True)
class StepFunction:
    """Right-continuous piecewise-constant function on ``[0, inf)``.

    ``f(t)`` is ``values[i]`` for the last knot ``knots[i] <= t`` and
    ``value_before_first_knot`` for ``t < knots[0]``. Beyond the last knot the
    last value is carried forward.
    """

    knots: np.ndarray
    values: np.ndarray
    value_before_first_knot: float

    def __post_init__(self):
        knots = np.asarray(self.knots, dtype=float)
        values = np.asarray(self.values, dtype=float)
        if knots.shape != values.shape or knots.ndim != 1:
            raise ValueError("knots and values must be 1-d arrays of equal length")
        if knots.size > 1 and np.any(np.diff(knots) <= 0):
            raise ValueError("knots must be strictly increasing")
        object.__setattr__(self, "knots", knots)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "value_before_first_knot", float(self.value_before_first_knot))

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        idx = np.searchsorted(self.knots, t, side="right") - 1
        padded = np.concatenate(([self.value_before_first_knot], self.values))
        out = padded[idx + 1]
        return out if out.ndim else float(out)

    def left_limit(self, t):
        """Evaluate ``f(t-)``, the value just before ``t``."""
        t = np.asarray(t, dtype=float)
        idx = np.searchsorted(self.knots, t, side="left") - 1
        padded = np.concatenate(([self.value_before_first_knot], self.values))
        out = padded[idx + 1]
        return out if out.ndim else float(out)

    def integrate(self, upper: float, lower: float = 0.0) -> float:
        """Exact integral over ``[lower, upper]`` as a sum of rectangles."""
        if upper <= lower:
            return 0.0
        inner = self.knots[(self.knots > lower) & (self.knots < upper)]
        edges = np.concatenate(([lower], inner, [upper]))
        return float(np.sum(self(edges[:-1]) * np.diff(edges)))


@dataclass(frozen=True)
class RmstEstimate:
    rmst: float
    variance: float
    t_star: float

    @property
    def se(self) -> float:
        return float(np.sqrt(self.variance))


@dataclass(frozen=True)
class RiskTable:
    """Distinct failure times with their failure and at-risk counts."""

    times: np.ndarray
    failures: np.ndarray
    at_risk: np.ndarray


def _validate(time, event):
    time = np.asarray(time, dtype=float).ravel()
    event = np.asarray(event).ravel()
    if time.size == 0:
        raise ValueError("empty sample")
    if time.shape != event.shape:
        raise ValueError("time and event must have the same length")
    if not np.all(np.isfinite(time)) or np.any(time < 0):
        raise ValueError("times must be finite and nonnegative")
    if not np.all((event == 0) | (event == 1)):
        raise ValueError("event indicators must be 0 or 1")
    return time, event.astype(bool)


def risk_table(time, event, target: Target | str = Target.EVENT) -> RiskTable:
    """Tabulate failures and risk-set sizes at each distinct failure time.

    For ``target="censoring"`` a censoring counts as the failure.
    """
    time, event = _validate(time, event)
    failed = event if Target(target) is Target.EVENT else ~event
    t_sorted = np.sort(time)
    fail_times, d = np.unique(time[failed], return_counts=True)
    y = t_sorted.size - np.searchsorted(t_sorted, fail_times, side="left")
    return RiskTable(fail_times, d.astype(float), y.astype(float))


def kaplan_meier(time, event, target: Target | str = Target.EVENT) -> StepFunction:
    """Product-limit estimate of the event-time or censoring-time survival function.

    Parameters
    ----------
    time : array_like
        Observed times ``U = min(T, C)``.
    event : array_like
        Event indicators ``I[T <= C]``.
    target : {"event", "censoring"}
        ``"censoring"`` swaps the roles of events and censorings, giving the
        estimate of ``G(t) = P(C > t)`` used for censoring weights.

    Returns
    -------
    StepFunction
        Knots at the distinct failure times of the chosen process.
    """
    table = risk_table(time, event, target)
    surv = np.cumprod(1.0 - table.failures / table.at_risk)
    return StepFunction(table.times, surv, 1.0)


def nelson_aalen(time, event) -> StepFunction:
    """Nelson-Aalen cumulative hazard, ``sum_{t_i <= t} d_i / Y(t_i)``."""
    table = risk_table(time, event, Target.EVENT)
    return StepFunction(table.times, np.cumsum(table.failures / table.at_risk), 0.0)


def rmst_nonparametric(time, event, t_star: float) -> RmstEstimate:
    """Area under the Kaplan-Meier curve on ``[0, t_star]`` and its variance.

    The variance is ``sum_i {int_{t_i}^{t_star} S(u) du}^2 d_i / Y(t_i)^2``
    over event times ``t_i <= t_star``. When the largest observed time is a
    censoring below ``t_star`` the curve is held constant up to ``t_star``.
    """
    if not t_star > 0:
        raise ValueError(f"t_star must be positive, got {t_star}")
    time, event = _validate(time, event)
    surv = kaplan_meier(time, event)
    if time.max() < t_star and not event[time == time.max()].any():
        warnings.warn(
            f"follow-up ends at {time.max():g} before t_star={t_star:g}; "
            "survival curve extrapolated as constant",
            stacklevel=2,
        )
    area = surv.integrate(t_star)
    table = risk_table(time, event, Target.EVENT)
    keep = table.times <= t_star
    times = table.times[keep]
    # tail areas int_{t_i}^{t*} S(u) du, accumulated right to left
    edges = np.append(times, t_star)
    pieces = surv(times) * np.diff(edges)
    tail = np.cumsum(pieces[::-1])[::-1]
    variance = float(np.sum(tail**2 * table.failures[keep] / table.at_risk[keep] ** 2))
    return RmstEstimate(min(max(area, 0.0), t_star), variance, float(t_star))
