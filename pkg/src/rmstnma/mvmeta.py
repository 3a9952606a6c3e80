"""Multivariate random-effects meta-analysis fitted by REML.

Each study ``j`` reports an estimate vector over the subset of dimensions it
observes, with within-study covariance ``S_j``. The marginal model is

    y_j ~ N(X_j theta, S_j + X_j R X_j'),

where ``X_j`` selects the observed dimensions. ``R`` (between-study
covariance) is estimated by REML and ``theta`` by generalized least squares.
"""

from __future__ import annotations

import enum
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import linalg, optimize

from .errors import RmstNmaError
from .ipcw import Param, StudyFit

LOG_DIAG_BOUNDS = (-15.0, 5.0)
_PENALTY = 1e20


class Structure(str, enum.Enum):
    DIAGONAL = "diagonal"
    UNSTRUCTURED = "unstructured"


@dataclass
class MvmetaInput:
    """Per-study estimates over present dimensions.

    ``present[j]`` holds indices into ``dimension_labels`` for the entries of
    ``estimates[j]`` (and rows/columns of ``within_cov[j]``).
    """

    estimates: list[np.ndarray]
    within_cov: list[np.ndarray]
    present: list[np.ndarray]
    dimension_labels: list

    def __post_init__(self):
        if not (len(self.estimates) == len(self.within_cov) == len(self.present)):
            raise RmstNmaError("estimates, within_cov and present must have one entry per study")
        self.estimates = [np.atleast_1d(np.asarray(e, dtype=float)) for e in self.estimates]
        self.within_cov = [np.atleast_2d(np.asarray(s, dtype=float)) for s in self.within_cov]
        self.present = [np.asarray(p, dtype=int) for p in self.present]
        for j, (e, s, p) in enumerate(zip(self.estimates, self.within_cov, self.present)):
            if s.shape != (e.size, e.size) or p.size != e.size:
                raise RmstNmaError(f"study {j}: within_cov does not match its estimate vector")
            if not np.allclose(s, s.T, atol=1e-12 * max(1.0, np.abs(s).max())):
                raise RmstNmaError(f"study {j}: within-study covariance is not symmetric")
            if e.size and np.linalg.eigvalsh((s + s.T) / 2).min() < -1e-10 * max(1.0, np.abs(s).max()):
                raise RmstNmaError(f"study {j}: within-study covariance is not positive semidefinite")

    @property
    def n_studies(self) -> int:
        return len(self.estimates)

    @classmethod
    def from_study_fits(cls, fits: Sequence[StudyFit], labels: Sequence[Param] | None = None):
        """Align first-stage fits on a common label set (union if not given)."""
        if labels is None:
            seen = {lab for f in fits for lab in f.labels}
            labels = sorted(p for p in seen if p.is_intercept) + sorted(p for p in seen if not p.is_intercept)
        index = {lab: i for i, lab in enumerate(labels)}
        present = [np.array([index[lab] for lab in f.labels]) for f in fits]
        order = [np.argsort(p) for p in present]
        return cls(
            estimates=[f.coefficients[o] for f, o in zip(fits, order)],
            within_cov=[f.covariance[np.ix_(o, o)] for f, o in zip(fits, order)],
            present=[p[o] for p, o in zip(present, order)],
            dimension_labels=list(labels),
        )


@dataclass(frozen=True)
class MvmetaFit:
    fixed_effects: np.ndarray
    fixed_cov: np.ndarray
    between_cov: np.ndarray
    structure: Structure
    reml_loglik: float
    converged: bool
    dimension_labels: list
    iterations: int = 0
    warnings: list[str] = field(default_factory=list)

    @property
    def between_sd(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.between_cov), 0.0, None))


class _Groups:
    """Studies batched by presence pattern for vectorized likelihood evaluation."""

    def __init__(self, inp: MvmetaInput, dim: int):
        patterns: dict[tuple, list[int]] = {}
        for j, p in enumerate(inp.present):
            patterns.setdefault(tuple(p.tolist()), []).append(j)
        self.dim = dim
        self.groups = []
        for pat, members in sorted(patterns.items()):
            idx = np.array(pat, dtype=int)
            y = np.stack([inp.estimates[j] for j in members])
            s = np.stack([inp.within_cov[j] for j in members])
            # canonical study order so results do not depend on input order
            keys = np.hstack([y, s.reshape(len(members), -1)])
            order = np.lexsort(keys.T[::-1])
            y, s = y[order], s[order]
            self.groups.append((idx, y, s))

    def gls(self, R: np.ndarray, grad: bool = False):
        """Return ``(theta, H, loglik[, dloglik/dR])`` or ``None`` if some ``V_j`` is not PD."""
        H = np.zeros((self.dim, self.dim))
        c = np.zeros(self.dim)
        logdet = 0.0
        parts = []
        for idx, y, s in self.groups:
            V = s + R[np.ix_(idx, idx)]
            try:
                chol = np.linalg.cholesky(V)
            except np.linalg.LinAlgError:
                return None
            logdet += 2.0 * np.log(np.diagonal(chol, axis1=1, axis2=2)).sum()
            Vinv = np.linalg.inv(V)
            H[np.ix_(idx, idx)] += Vinv.sum(axis=0)
            c[idx] += np.einsum("jab,jb->a", Vinv, y)
            parts.append((idx, y, Vinv))
        try:
            Hc = linalg.cho_factor(H)
        except linalg.LinAlgError:
            return None
        theta = linalg.cho_solve(Hc, c)
        quad = 0.0
        for idx, y, Vinv in parts:
            r = y - theta[idx]
            quad += np.einsum("ja,jab,jb->", r, Vinv, r)
        logdet_h = 2.0 * np.log(np.diag(Hc[0])).sum()
        ll = -0.5 * (logdet + quad + logdet_h)
        if not grad:
            return theta, H, ll
        # d ll / dR = 1/2 sum_j X_j' (V^-1 r r' V^-1 - V^-1 + V^-1 X H^-1 X' V^-1) X_j
        Hinv = linalg.cho_solve(Hc, np.eye(self.dim))
        G = np.zeros((self.dim, self.dim))
        for idx, y, Vinv in parts:
            u = np.einsum("jab,jb->ja", Vinv, y - theta[idx])
            VHV = Vinv @ Hinv[np.ix_(idx, idx)] @ Vinv
            G[np.ix_(idx, idx)] += (np.einsum("ja,jb->ab", u, u) - Vinv.sum(axis=0) + VHV.sum(axis=0)) / 2
        return theta, H, ll, (G + G.T) / 2


def reml_loglik(inp: MvmetaInput, R: np.ndarray) -> float:
    """Restricted log-likelihood (constants dropped) at between-study covariance ``R``."""
    out = _Groups(inp, len(inp.dimension_labels)).gls(np.asarray(R, dtype=float))
    return -np.inf if out is None else out[2]


def _unpack(params: np.ndarray, dim: int, structure: Structure) -> np.ndarray:
    return _factor(params, dim, structure) @ _factor(params, dim, structure).T


def _factor(params: np.ndarray, dim: int, structure: Structure) -> np.ndarray:
    if structure is Structure.DIAGONAL:
        return np.diag(np.exp(params))
    L = np.zeros((dim, dim))
    L[np.tril_indices(dim)] = params
    L[np.diag_indices(dim)] = np.exp(np.diag(L))
    return L


def _chain(G: np.ndarray, params: np.ndarray, dim: int, structure: Structure) -> np.ndarray:
    """Map ``d/dR`` to ``d/dparams`` through ``R = L L'``."""
    L = _factor(params, dim, structure)
    dL = 2.0 * G @ L
    if structure is Structure.DIAGONAL:
        return np.diag(dL) * np.diag(L)
    dL[np.diag_indices(dim)] *= np.diag(L)
    return dL[np.tril_indices(dim)]


def _pack(R: np.ndarray, structure: Structure) -> np.ndarray:
    dim = R.shape[0]
    lo = LOG_DIAG_BOUNDS[0]
    floor = np.exp(2 * lo) * 10
    if structure is Structure.DIAGONAL:
        return np.clip(0.5 * np.log(np.maximum(np.diag(R), floor)), *LOG_DIAG_BOUNDS)
    L = np.linalg.cholesky(R + floor * np.eye(dim))
    L[np.diag_indices(dim)] = np.clip(np.log(np.diag(L)), *LOG_DIAG_BOUNDS)
    return L[np.tril_indices(dim)]


def _bounds(dim: int, structure: Structure):
    if structure is Structure.DIAGONAL:
        return [LOG_DIAG_BOUNDS] * dim
    rows, cols = np.tril_indices(dim)
    return [LOG_DIAG_BOUNDS if r == c else (None, None) for r, c in zip(rows, cols)]


def _polish(groups: "_Groups", L0: np.ndarray, structure: Structure, max_iter: int, gtol: float):
    """Refine over the plain factor ``R = L L'``.

    The log-Cholesky gradient vanishes as a diagonal entry heads to its lower
    bound, which stalls the first pass at rank-deficient optima; the plain
    factor keeps a usable gradient there.
    """
    dim = L0.shape[0]
    if structure is Structure.DIAGONAL:
        def unpack(v):
            return np.diag(v)
        x0 = np.diag(L0).copy()
    else:
        rows, cols = np.tril_indices(dim)

        def unpack(v):
            L = np.zeros((dim, dim))
            L[rows, cols] = v
            return L
        x0 = L0[rows, cols].copy()

    def objective(v):
        L = unpack(v)
        out = groups.gls(L @ L.T, grad=True)
        if out is None or not np.isfinite(out[2]):
            return _PENALTY, np.zeros_like(v)
        dL = 2.0 * out[3] @ L
        g = np.diag(dL) if structure is Structure.DIAGONAL else dL[rows, cols]
        return -out[2], -g

    res = optimize.minimize(objective, x0, method="L-BFGS-B", jac=True,
                            options={"maxiter": max_iter, "ftol": 1e-15, "gtol": gtol})
    L = unpack(res.x)
    return L @ L.T, float(res.fun), int(res.nit)


def moment_start(inp: MvmetaInput) -> np.ndarray:
    """Diagonal start from per-dimension DerSimonian-Laird estimates."""
    dim = len(inp.dimension_labels)
    tau2 = np.zeros(dim)
    for d in range(dim):
        ys, vs = [], []
        for e, s, p in zip(inp.estimates, inp.within_cov, inp.present):
            hit = np.flatnonzero(p == d)
            if hit.size:
                ys.append(e[hit[0]])
                vs.append(s[hit[0], hit[0]])
        ys, vs = np.array(ys), np.array(vs)
        if ys.size < 2 or np.any(vs <= 0):
            continue
        w = 1.0 / vs
        mean = np.sum(w * ys) / w.sum()
        q = np.sum(w * (ys - mean) ** 2)
        denom = w.sum() - np.sum(w**2) / w.sum()
        tau2[d] = max(0.0, (q - (ys.size - 1)) / denom) if denom > 0 else 0.0
    return np.diag(tau2)


def default_structure(dim: int) -> Structure:
    return Structure.UNSTRUCTURED if dim <= 6 else Structure.DIAGONAL


def _drop_unobserved(inp: MvmetaInput):
    seen = np.zeros(len(inp.dimension_labels), dtype=bool)
    for p in inp.present:
        seen[p] = True
    if seen.all():
        return inp, []
    keep = np.flatnonzero(seen)
    remap = -np.ones(seen.size, dtype=int)
    remap[keep] = np.arange(keep.size)
    dropped = [inp.dimension_labels[i] for i in np.flatnonzero(~seen)]
    msg = f"dimensions not observed in any study were dropped: {dropped}"
    warnings.warn(msg, stacklevel=3)
    new = MvmetaInput(
        estimates=inp.estimates,
        within_cov=inp.within_cov,
        present=[remap[p] for p in inp.present],
        dimension_labels=[inp.dimension_labels[i] for i in keep],
    )
    return new, [msg]


def reml_fit(
    inp: MvmetaInput,
    structure: Structure | str | None = None,
    max_iter: int = 500,
    ftol: float = 1e-9,
    gtol: float = 1e-6,
) -> MvmetaFit:
    """Fit the multivariate random-effects model by REML.

    ``R`` is parametrized by its log-Cholesky factor (unstructured) or by log
    standard deviations (diagonal) and optimized with L-BFGS-B using the
    analytic REML gradient, started from ``0.1 I`` and from a diagonal
    method-of-moments estimate. ``R = 0`` is always evaluated as a candidate,
    so boundary solutions are returned exactly.
    """
    if inp.n_studies < 2:
        raise RmstNmaError("at least two studies are required")
    inp, notes = _drop_unobserved(inp)
    dim = len(inp.dimension_labels)
    structure = default_structure(dim) if structure is None else Structure(structure)
    groups = _Groups(inp, dim)

    def objective(params):
        out = groups.gls(_unpack(params, dim, structure), grad=True)
        if out is None or not np.isfinite(out[2]):
            return _PENALTY, np.zeros_like(params)
        return -out[2], -_chain(out[3], params, dim, structure)

    starts = [0.1 * np.eye(dim), moment_start(inp)]
    best_params, best_val, converged, iterations = None, np.inf, False, 0
    for start in starts:
        res = optimize.minimize(
            objective,
            _pack(start, structure),
            method="L-BFGS-B",
            jac=True,
            bounds=_bounds(dim, structure),
            options={"maxiter": max_iter, "ftol": ftol, "gtol": gtol},
        )
        iterations += int(res.nit)
        if res.fun < best_val:
            best_params, best_val = res.x, float(res.fun)
        converged = converged or bool(res.success)

    R = _unpack(best_params, dim, structure)
    polished, value, nit = _polish(groups, _factor(best_params, dim, structure), structure, max_iter, gtol * 1e-2)
    iterations += nit
    if value < best_val:
        R, best_val = polished, value
    zero = groups.gls(np.zeros((dim, dim)))
    if zero is not None and -zero[2] <= best_val:
        R, best_val = np.zeros((dim, dim)), -zero[2]
    R = (R + R.T) / 2
    theta, H, ll = groups.gls(R)
    fixed_cov = linalg.inv(H)
    fixed_cov = (fixed_cov + fixed_cov.T) / 2
    return MvmetaFit(
        fixed_effects=theta,
        fixed_cov=fixed_cov,
        between_cov=R,
        structure=structure,
        reml_loglik=float(ll),
        converged=converged,
        dimension_labels=list(inp.dimension_labels),
        iterations=iterations,
        warnings=notes,
    )


def selection_vector(labels: Sequence[Param], treatment, covariates=()) -> np.ndarray:
    """Coefficients ``c`` with ``c' theta = alpha_k + sum_p x_p beta_kp``.

    Interactions absent from ``labels`` contribute nothing.
    """
    c = np.zeros(len(labels))
    index = {lab: i for i, lab in enumerate(labels)}
    if Param(treatment) not in index:
        raise RmstNmaError(f"unknown treatment {treatment!r}")
    c[index[Param(treatment)]] = 1.0
    for p, x in enumerate(np.atleast_1d(np.asarray(covariates, dtype=float))):
        i = index.get(Param(treatment, p))
        if i is not None:
            c[i] = x
    return c


def predict_log_rmst(fit: MvmetaFit, treatment, covariates=()) -> tuple[float, float]:
    """Pooled log-RMST for ``treatment`` at ``covariates`` with its delta-method SE."""
    c = selection_vector(fit.dimension_labels, treatment, covariates)
    return float(c @ fit.fixed_effects), float(np.sqrt(max(c @ fit.fixed_cov @ c, 0.0)))
