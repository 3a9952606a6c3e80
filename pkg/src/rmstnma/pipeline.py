"""End-to-end RMST network meta-analysis.

Three estimators share one result type, :class:`NmaFit`:

* ``two-stage``: per-study IPCW RMST regression pooled by multivariate REML;
* ``one-stage``: weighted GLMM over all participants fitted by PQL;
* ``npf``: per-arm Kaplan-Meier RMSTs (log scale) pooled by multivariate REML.
"""

from __future__ import annotations

import enum
import logging
import os
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import stats

from .dataset import Dataset
from .errors import RmstNmaError
from .ipcw import Param, StudyFit, fit_study, param_labels
from .mvmeta import MvmetaInput, Structure, reml_fit, selection_vector
from .pql import CovStructure, RandomStructure, assemble_design, pql_fit
from .survival import rmst_nonparametric

logger = logging.getLogger(__name__)

Z95 = float(stats.norm.ppf(0.975))


class Method(str, enum.Enum):
    TWO_STAGE = "two-stage"
    ONE_STAGE = "one-stage"
    NPF = "npf"


@dataclass(frozen=True)
class ContrastEstimate:
    treatment_a: str
    treatment_b: str
    covariates: tuple
    log_rmst_diff: float
    se: float
    rmst_ratio: float
    ci_low: float
    ci_high: float
    p_value: float


@dataclass(frozen=True)
class NmaFit:
    method: Method
    labels: list[Param]
    fixed_effects: np.ndarray
    fixed_cov: np.ndarray
    between_sd: np.ndarray
    treatment_labels: list[str]
    covariate_names: list[str]
    covariate_centers: np.ndarray
    converged: bool
    study_fits: dict = field(default_factory=dict)
    diagnostics: dict = field(default_factory=dict)

    def treatment_code(self, treatment) -> int:
        if isinstance(treatment, str):
            if treatment not in self.treatment_labels:
                raise RmstNmaError(f"unknown treatment {treatment!r}")
            code = self.treatment_labels.index(treatment)
        else:
            code = int(treatment)
        if Param(code) not in self.labels:
            raise RmstNmaError(f"treatment {treatment!r} is not in the fitted network")
        return code

    def _vector(self, treatment, covariates) -> np.ndarray:
        x = self._centered(covariates)
        return selection_vector(self.labels, self.treatment_code(treatment), x)

    def _centered(self, covariates) -> np.ndarray:
        p = len(self.covariate_names)
        if covariates is None:
            return self.covariate_centers * 0.0 if p else np.zeros(0)
        x = np.atleast_1d(np.asarray(covariates, dtype=float))
        if x.size != p:
            raise RmstNmaError(f"expected {p} covariate values, got {x.size}")
        return x - self.covariate_centers

    def predict(self, treatment, covariates=None) -> tuple[float, float]:
        """Log-RMST and its standard error for ``treatment`` at raw ``covariates``.

        ``covariates=None`` means the centering point (zero when uncentered).
        """
        c = self._vector(treatment, covariates)
        return float(c @ self.fixed_effects), float(np.sqrt(max(c @ self.fixed_cov @ c, 0.0)))

    def coefficient_table(self) -> list[dict]:
        """Rows of coefficient, 95% CI, two-sided Wald p-value and between-study SD."""
        se = np.sqrt(np.clip(np.diag(self.fixed_cov), 0.0, None))
        rows = []
        for lab, est, s, tau in zip(self.labels, self.fixed_effects, se, self.between_sd):
            z = est / s if s > 0 else np.inf
            rows.append({
                "parameter": self.label_name(lab),
                "estimate": float(est),
                "se": float(s),
                "ci_low": float(est - Z95 * s),
                "ci_high": float(est + Z95 * s),
                "p_value": float(2 * stats.norm.sf(abs(z))),
                "between_sd": float(tau),
            })
        return rows

    def label_name(self, lab: Param) -> str:
        arm = self.treatment_labels[lab.arm]
        return arm if lab.is_intercept else f"{arm}:{self.covariate_names[lab.cov]}"


def contrast(fit: NmaFit, a, b, covariates=None) -> ContrastEstimate:
    """Log-RMST difference ``a - b`` at ``covariates`` with a 95% Wald interval."""
    c = fit._vector(a, covariates) - fit._vector(b, covariates)
    diff = float(c @ fit.fixed_effects)
    se = float(np.sqrt(max(c @ fit.fixed_cov @ c, 0.0)))
    z = diff / se if se > 0 else (0.0 if diff == 0 else np.inf)
    x = () if covariates is None else tuple(float(v) for v in np.atleast_1d(covariates))
    name = lambda t: fit.treatment_labels[fit.treatment_code(t)]  # noqa: E731
    return ContrastEstimate(
        treatment_a=name(a),
        treatment_b=name(b),
        covariates=x,
        log_rmst_diff=diff,
        se=se,
        rmst_ratio=float(np.exp(diff)),
        ci_low=diff - Z95 * se,
        ci_high=diff + Z95 * se,
        p_value=float(2 * stats.norm.sf(abs(z))),
    )


def all_contrasts(fit: NmaFit, covariates=None) -> list[ContrastEstimate]:
    arms = [lab.arm for lab in fit.labels if lab.is_intercept]
    return [contrast(fit, a, b, covariates) for i, a in enumerate(arms) for b in arms[i + 1:]]


def _prepare(data: Dataset, covariates, center):
    data = data.select_covariates(covariates)
    p = len(data.covariate_names)
    centers = np.zeros(p)
    if center:
        names = data.covariate_names if center is True else list(center)
        for name in names:
            j = data.covariate_names.index(name)
            col = data.covariates[:, j]
            if center is True and np.all(np.isin(col, (0.0, 1.0))):
                continue  # binary columns stay uncentered under blanket centering
            centers[j] = col.mean()
    if np.any(centers):
        data = Dataset(
            data.study, data.treatment, data.time, data.event,
            data.covariates - centers, data.treatment_labels, data.covariate_names,
        )
    return data, centers


def _workers(workers):
    if workers is not None:
        return max(1, int(workers))
    env = os.environ.get("RMST_NMA_THREADS")
    return max(1, int(env)) if env else 1


def _map(func, items, workers):
    if workers > 1 and len(items) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(func, items))
    return [func(it) for it in items]


def first_stage(data: Dataset, t_star: float, link: str = "log", workers=None):
    """IPCW regression in every study; returns ``(fits, failures)`` keyed by study id."""

    def one(sid):
        rows = data.study == sid
        try:
            return sid, fit_study(
                data.time[rows], data.event[rows], data.treatment[rows],
                data.covariates[rows], t_star, link=link, study_id=sid,
            )
        except (RmstNmaError, np.linalg.LinAlgError) as exc:
            return sid, exc

    fits, failures = {}, {}
    for sid, res in _map(one, data.study_ids, _workers(workers)):
        if isinstance(res, StudyFit):
            fits[sid] = res
        else:
            failures[sid] = str(res)
            logger.warning("first stage failed for study %s: %s", sid, res)
    return fits, failures


def fit_two_stage(
    data: Dataset,
    t_star: float,
    covariates: Sequence[str] | None = None,
    center=False,
    structure: Structure | str | None = None,
    link: str = "log",
    workers=None,
) -> NmaFit:
    """Per-study IPCW RMST regression, then multivariate REML pooling."""
    data, centers = _prepare(data, covariates, center)
    fits, failures = first_stage(data, t_star, link=link, workers=workers)
    if len(fits) < 2:
        raise RmstNmaError(f"two-stage model needs at least 2 successful studies; failures: {failures}")
    labels = param_labels(range(data.n_treatments), len(data.covariate_names))
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        mv = reml_fit(MvmetaInput.from_study_fits(list(fits.values()), labels), structure=structure)
    notes = [str(w.message) for w in caught]
    nonconv = [sid for sid, f in fits.items() if not f.converged]
    return NmaFit(
        method=Method.TWO_STAGE,
        labels=mv.dimension_labels,
        fixed_effects=mv.fixed_effects,
        fixed_cov=mv.fixed_cov,
        between_sd=mv.between_sd,
        treatment_labels=list(data.treatment_labels),
        covariate_names=list(data.covariate_names),
        covariate_centers=centers,
        converged=mv.converged and not nonconv,
        study_fits=fits,
        diagnostics={
            "first_stage_failures": failures,
            "first_stage_nonconverged": nonconv,
            "second_stage_converged": mv.converged,
            "structure": mv.structure.value,
            "between_cov": mv.between_cov,
            "reml_loglik": mv.reml_loglik,
            "warnings": notes + mv.warnings,
        },
    )


def fit_one_stage(
    data: Dataset,
    t_star: float,
    covariates: Sequence[str] | None = None,
    center=False,
    random_structure: RandomStructure | str = RandomStructure.FULL,
    cov_structure: CovStructure | str = CovStructure.DIAGONAL,
    phi: float | None = 1.0,
    link: str = "log",
) -> NmaFit:
    """Weighted GLMM over all studies' participants, fitted by PQL."""
    data, centers = _prepare(data, covariates, center)
    design = assemble_design(
        data.study, data.treatment, data.time, data.event, data.covariates, t_star,
        random_structure=random_structure, arms=range(data.n_treatments),
    )
    res = pql_fit(design, link=link, cov_structure=cov_structure, phi=phi)
    return NmaFit(
        method=Method.ONE_STAGE,
        labels=res.labels,
        fixed_effects=res.gamma,
        fixed_cov=res.gamma_cov,
        between_sd=res.between_sd,
        treatment_labels=list(data.treatment_labels),
        covariate_names=list(data.covariate_names),
        covariate_centers=centers,
        converged=res.converged,
        diagnostics={
            "iterations": res.iterations,
            "phi": res.phi,
            "boundary": [str(b) for b in res.boundary],
            "jitter": res.diagnostics["jitter"],
            "warnings": list(design.warnings),
        },
    )


def npf_first_stage(data: Dataset, t_star: float):
    """Per study-arm log-RMST from the Kaplan-Meier curve with delta-method variance.

    Arms whose RMST variance is zero (no events before ``t_star``) are dropped
    with a note, since they carry no usable within-study variance.
    """
    estimates, covs, present, notes = [], [], [], []
    for sid in data.study_ids:
        rows = data.study == sid
        est, var, arms = [], [], []
        for k in sorted(np.unique(data.treatment[rows]).tolist()):
            r = rows & (data.treatment == k)
            with warnings.catch_warnings(record=True) as caught:
                warnings.simplefilter("always")
                fit = rmst_nonparametric(data.time[r], data.event[r], t_star)
            notes.extend(f"study {sid}: {w.message}" for w in caught)
            if fit.variance <= 0 or fit.rmst <= 0:
                notes.append(f"study {sid}, arm {data.treatment_labels[k]}: RMST variance undefined; arm dropped")
                continue
            est.append(np.log(fit.rmst))
            var.append(fit.variance / fit.rmst**2)
            arms.append(k)
        if arms:
            estimates.append(np.array(est))
            covs.append(np.diag(var))
            present.append(np.array(arms))
    return estimates, covs, present, notes


def fit_npf(
    data: Dataset,
    t_star: float,
    structure: Structure | str | None = None,
) -> NmaFit:
    """Unadjusted arm-level RMSTs pooled by multivariate REML (no covariates)."""
    estimates, covs, present, notes = npf_first_stage(data, t_star)
    labels = [Param(k) for k in range(data.n_treatments)]
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        mv = reml_fit(MvmetaInput(estimates, covs, present, labels), structure=structure)
    notes += [str(w.message) for w in caught]
    return NmaFit(
        method=Method.NPF,
        labels=mv.dimension_labels,
        fixed_effects=mv.fixed_effects,
        fixed_cov=mv.fixed_cov,
        between_sd=mv.between_sd,
        treatment_labels=list(data.treatment_labels),
        covariate_names=list(data.covariate_names),
        covariate_centers=np.zeros(len(data.covariate_names)),
        converged=mv.converged,
        diagnostics={
            "structure": mv.structure.value,
            "between_cov": mv.between_cov,
            "reml_loglik": mv.reml_loglik,
            "warnings": notes + mv.warnings,
        },
    )


def fit(data: Dataset, method: Method | str, t_star: float, **kwargs) -> NmaFit:
    method = Method(method)
    if method is Method.TWO_STAGE:
        return fit_two_stage(data, t_star, **kwargs)
    if method is Method.ONE_STAGE:
        return fit_one_stage(data, t_star, **kwargs)
    kwargs = {k: v for k, v in kwargs.items() if k == "structure"}
    return fit_npf(data, t_star, **kwargs)
