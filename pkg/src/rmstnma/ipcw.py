"""Inverse-probability-of-censoring-weighted RMST regression for one study.

The model is ``g(E[min(T, t*) | x]) = x' beta`` with an arm-based design: one
indicator column per treatment arm present in the study, followed by one
treatment-by-covariate column per (arm, covariate) pair. Coefficients solve

    S_n(beta) = n^-1 sum_i w_i x_i {Y_i - g^-1(x_i' beta)} = 0,

with ``w_i = delta*_i / G(Y_i)`` and ``G`` the Kaplan-Meier estimate of the
censoring distribution within the study.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np
from scipy import linalg

from .errors import (
    ArmUnidentifiableError,
    CensoringWeightError,
    RankDeficientError,
    RmstNmaError,
)
from .survival import Target, kaplan_meier


class Param(NamedTuple):
    """Label of one arm-based coefficient.

    ``cov is None`` marks the arm's log-RMST intercept (alpha); otherwise the
    entry is the interaction of arm ``arm`` with covariate index ``cov``.
    """

    arm: int
    cov: int | None = None

    @property
    def is_intercept(self) -> bool:
        return self.cov is None


def param_labels(arms: Sequence[int], n_cov: int) -> list[Param]:
    """Ordering used everywhere: all intercepts, then each arm's interactions."""
    arms = list(arms)
    return [Param(k) for k in arms] + [Param(k, p) for k in arms for p in range(n_cov)]


def arm_design(treatment, covariates, arms: Sequence[int]) -> np.ndarray:
    """Arm-based design matrix with columns ordered as :func:`param_labels`."""
    treatment = np.asarray(treatment)
    covariates = np.asarray(covariates, dtype=float).reshape(treatment.size, -1)
    n_cov = covariates.shape[1]
    ind = (treatment[:, None] == np.asarray(list(arms))[None, :]).astype(float)
    if np.any(ind.sum(axis=1) != 1):
        raise RmstNmaError("every row must belong to exactly one of the listed arms")
    inter = (ind[:, :, None] * covariates[:, None, :]).reshape(treatment.size, len(arms) * n_cov)
    return np.hstack([ind, inter])


class Link:
    """Log or identity link with its inverse and inverse derivative."""

    def __init__(self, name: str):
        name = str(name).lower()
        if name not in ("log", "identity"):
            raise ValueError(f"unknown link {name!r}")
        self.name = name

    def __call__(self, mu):
        return np.log(mu) if self.name == "log" else np.asarray(mu, dtype=float)

    def inverse(self, eta):
        return np.exp(eta) if self.name == "log" else np.asarray(eta, dtype=float)

    def inverse_deriv(self, eta):
        return np.exp(eta) if self.name == "log" else np.ones_like(eta, dtype=float)

    def __repr__(self):
        return f"Link({self.name!r})"


def build_weights(time, event, t_star: float):
    """Truncated outcomes and IPCW weights for one study.

    Returns
    -------
    y : ndarray
        ``min(U, t_star)``.
    delta_star : ndarray of bool
        ``I[C >= Y]``, observable as ``event or U >= t_star``.
    weight : ndarray
        ``delta_star / G(y)`` with ``G`` evaluated right-continuously.
    """
    if not t_star > 0:
        raise ValueError(f"t_star must be positive, got {t_star}")
    time = np.asarray(time, dtype=float)
    event = np.asarray(event).astype(bool)
    cens = kaplan_meier(time, event, Target.CENSORING)
    y = np.minimum(time, t_star)
    delta_star = event | (time >= t_star)
    g = cens(y)
    bad = delta_star & (g <= 0)
    if bad.any():
        raise CensoringWeightError(
            f"censoring weight undefined (G=0) at time {y[bad].min():g}; "
            "t_star is beyond identifiable follow-up"
        )
    weight = np.zeros_like(y)
    weight[delta_star] = 1.0 / g[delta_star]
    return y, delta_star, weight


@dataclass(frozen=True)
class StudyFit:
    coefficients: np.ndarray
    covariance: np.ndarray
    labels: list[Param]
    n_effective: int
    converged: bool
    iterations: int
    score_norm: float
    link: str = "log"
    study_id: object = None
    warnings: list[str] = field(default_factory=list)

    def fitted(self, X) -> np.ndarray:
        return Link(self.link).inverse(np.asarray(X) @ self.coefficients)


def _check_rank(X: np.ndarray, labels):
    _, r, piv = linalg.qr(X, mode="economic", pivoting=True)
    diag = np.abs(np.diag(r))
    rank = int(np.sum(diag > diag.max() * max(X.shape) * np.finfo(float).eps)) if diag.size else 0
    if rank < X.shape[1]:
        names = [str(labels[i]) if labels is not None else str(i) for i in sorted(piv[rank:])]
        raise RankDeficientError(f"design is rank deficient; collinear columns: {', '.join(names)}")


def estimating_equation(X, y, weight, beta, link="log") -> np.ndarray:
    """``S_n(beta)``, averaged over all rows including zero-weight ones."""
    mu = Link(link).inverse(X @ beta)
    return X.T @ (weight * (y - mu)) / X.shape[0]


def sandwich_covariance(X, y, weight, beta, link="log") -> np.ndarray:
    """Robust ``A^-1 B A^-T / n`` with ``G`` treated as known."""
    lk = Link(link)
    eta = X @ beta
    resid = y - lk.inverse(eta)
    n = X.shape[0]
    a = (X * (weight * lk.inverse_deriv(eta))[:, None]).T @ X / n
    xb = X * (weight * resid)[:, None]
    b = xb.T @ xb / n
    a_inv = linalg.inv(a)
    cov = a_inv @ b @ a_inv.T / n
    return (cov + cov.T) / 2


def _initial(X, y, weight, lk: Link, labels):
    pos = weight > 0
    beta = np.zeros(X.shape[1])
    if labels is not None:
        for j, lab in enumerate(labels):
            if lab.is_intercept:
                rows = pos & (X[:, j] == 1)
                beta[j] = lk(np.average(y[rows], weights=weight[rows]))
        return beta
    target = lk(y[pos])
    sw = np.sqrt(weight[pos])
    return linalg.lstsq(X[pos] * sw[:, None], target * sw)[0]


def fit_ipcw_rmst(
    X,
    y,
    weight,
    link: str = "log",
    max_iter: int = 50,
    tol: float = 1e-8,
    labels: Sequence[Param] | None = None,
    study_id=None,
) -> StudyFit:
    """Solve the weighted RMST estimating equation by Fisher scoring.

    The update is ``beta += (sum w_i mu'_i x_i x_i')^-1 sum w_i x_i (y_i - mu_i)``
    with step halving whenever the sup-norm of the score does not decrease.
    Convergence means ``max|S_n(beta)| <= tol``; failing that within
    ``max_iter`` steps returns ``converged=False``.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    weight = np.asarray(weight, dtype=float)
    lk = Link(link)
    labels = list(labels) if labels is not None else None
    if np.any(weight < 0):
        raise RmstNmaError("weights must be nonnegative")
    pos = weight > 0
    if labels is not None:
        for j, lab in enumerate(labels):
            if lab.is_intercept and not np.any(pos & (X[:, j] != 0)):
                raise ArmUnidentifiableError(f"arm unidentifiable: no positive-weight rows for arm {lab.arm}")
    if lk.name == "log" and np.any(pos & (y <= 0)):
        raise RmstNmaError("log link requires positive truncated times; found Y <= 0 with positive weight")
    _check_rank(X[pos], labels)

    n = X.shape[0]
    Xp, yp, wp = X[pos], y[pos], weight[pos]
    beta = _initial(X, y, weight, lk, labels)

    def score(b):
        return Xp.T @ (wp * (yp - lk.inverse(Xp @ b))) / n

    s = score(beta)
    err = np.max(np.abs(s))
    it = 0
    while err > tol and it < max_iter:
        it += 1
        d = lk.inverse_deriv(Xp @ beta)
        info = (Xp * (wp * d)[:, None]).T @ Xp / n
        step = linalg.solve(info, s, assume_a="pos")
        for _ in range(30):
            cand = beta + step
            s_new = score(cand)
            err_new = np.max(np.abs(s_new))
            if np.isfinite(err_new) and err_new < err:
                break
            step = step / 2
        else:
            break
        beta, s, err = cand, s_new, err_new

    cov = sandwich_covariance(Xp, yp, wp, beta, link)
    return StudyFit(
        coefficients=beta,
        covariance=cov,
        labels=labels if labels is not None else [],
        n_effective=int(pos.sum()),
        converged=bool(err <= tol),
        iterations=it,
        score_norm=float(err),
        link=lk.name,
        study_id=study_id,
    )


def fit_study(
    time,
    event,
    treatment,
    covariates,
    t_star: float,
    link: str = "log",
    max_iter: int = 50,
    tol: float = 1e-8,
    study_id=None,
) -> StudyFit:
    """Weights, arm-based design and IPCW fit for one study's records."""
    treatment = np.asarray(treatment)
    covariates = np.asarray(covariates, dtype=float).reshape(treatment.size, -1)
    y, _, w = build_weights(time, event, t_star)
    arms = sorted(np.unique(treatment).tolist())
    labels = param_labels(arms, covariates.shape[1])
    X = arm_design(treatment, covariates, arms)
    return fit_ipcw_rmst(X, y, w, link=link, max_iter=max_iter, tol=tol, labels=labels, study_id=study_id)
