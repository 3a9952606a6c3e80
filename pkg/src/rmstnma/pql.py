"""One-stage weighted GLMM for IPD network meta-analysis, fitted by PQL.

The linear predictor for participant ``i`` of study ``j`` is

    g(mu_ij) = x_ij' gamma + z_ij' r_j,    r_j ~ N(0, G),

where ``x_ij`` is the arm-based design (arm indicators and arm-by-covariate
columns) and ``z_ij`` is the subset of those columns that carry study-level
random effects. Penalized quasi-likelihood alternates between

1. forming the working response ``Y* = eta + (y - mu) g'(mu)`` and the working
   weights ``q = w / (phi v(mu) g'(mu)^2)``;
2. maximizing the REML likelihood of the working linear mixed model
   ``Y* ~ N(X gamma, Q^-1 + Z D Z')`` over the variance parameters;
3. solving the GLS equations for ``gamma`` and predicting ``r``.

``V`` is block diagonal by study and every solve goes through the Woodbury
identity on per-study sufficient statistics, so no ``N x N`` matrix is formed.
"""

from __future__ import annotations

import enum
import logging
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import linalg, optimize, sparse

from .errors import InsufficientSampleError, RmstNmaError
from .ipcw import Link, Param, arm_design, build_weights, fit_ipcw_rmst, param_labels

logger = logging.getLogger(__name__)


class RandomStructure(str, enum.Enum):
    """Which fixed-effect columns also get a study-level random effect."""

    NONE = "none"
    INTERCEPTS = "intercepts"
    FULL = "full"


class CovStructure(str, enum.Enum):
    """Shape of the per-study random-effect covariance ``G``."""

    DIAGONAL = "diagonal"
    ARM = "arm"  # unstructured within each arm's block, independent across arms


@dataclass(frozen=True)
class MixedDesign:
    x_fixed: np.ndarray
    z_random: sparse.csr_matrix
    y: np.ndarray
    weights: np.ndarray
    study_index: np.ndarray
    labels: list[Param]
    random_cols: np.ndarray
    study_ids: list
    warnings: list[str] = field(default_factory=list)

    @property
    def n_studies(self) -> int:
        return len(self.study_ids)

    @property
    def random_labels(self) -> list[Param]:
        return [self.labels[c] for c in self.random_cols]


@dataclass(frozen=True)
class PqlFit:
    gamma: np.ndarray
    gamma_cov: np.ndarray
    r_hat: np.ndarray
    tau: np.ndarray
    D_block: np.ndarray
    phi: float
    converged: bool
    iterations: int
    labels: list[Param]
    random_labels: list[Param]
    boundary: list[Param]
    diagnostics: dict = field(default_factory=dict)

    @property
    def between_sd(self) -> np.ndarray:
        """Random-effect SDs aligned with ``labels`` (0 where no random effect)."""
        sd = np.zeros(len(self.labels))
        index = {lab: i for i, lab in enumerate(self.labels)}
        for lab, v in zip(self.random_labels, np.diag(self.D_block)):
            sd[index[lab]] = np.sqrt(max(v, 0.0))
        return sd


def assemble_design(
    study,
    treatment,
    time,
    event,
    covariates,
    t_star: float,
    random_structure: RandomStructure | str = RandomStructure.FULL,
    arms: Sequence[int] | None = None,
) -> MixedDesign:
    """Stack all studies into one arm-based mixed design with per-study IPCW weights."""
    study = np.asarray(study)
    treatment = np.asarray(treatment)
    time = np.asarray(time, dtype=float)
    event = np.asarray(event)
    covariates = np.asarray(covariates, dtype=float).reshape(study.size, -1)
    structure = RandomStructure(random_structure)
    study_ids, study_index = np.unique(study, return_inverse=True)
    arms = sorted(np.unique(treatment).tolist()) if arms is None else list(arms)
    labels = param_labels(arms, covariates.shape[1])
    X = arm_design(treatment, covariates, arms)

    y = np.empty(study.size)
    w = np.empty(study.size)
    notes = []
    for j, sid in enumerate(study_ids):
        rows = study_index == j
        y[rows], _, w[rows] = build_weights(time[rows], event[rows], t_star)
        if np.unique(treatment[rows]).size < 2:
            notes.append(f"study {sid} has a single arm")

    if structure is RandomStructure.NONE:
        random_cols = np.array([], dtype=int)
    elif structure is RandomStructure.INTERCEPTS:
        random_cols = np.array([i for i, lab in enumerate(labels) if lab.is_intercept])
    else:
        random_cols = np.arange(len(labels))
    m = random_cols.size
    J = study_ids.size
    Zvals = X[:, random_cols]
    rows = np.repeat(np.arange(study.size), m)
    cols = (study_index[:, None] * m + np.arange(m)[None, :]).ravel()
    Z = sparse.csr_matrix((Zvals.ravel(), (rows, cols)), shape=(study.size, J * m))
    Z.eliminate_zeros()
    return MixedDesign(X, Z, y, w, study_index, labels, random_cols, study_ids.tolist(), notes)


def _variance_fn(link: Link, mu):
    return mu if link.name == "log" else np.ones_like(mu)


def estimate_dispersion(design: MixedDesign, mu_hat, link: str = "log") -> float:
    """Pearson dispersion ``sum w (y - mu)^2 / v(mu) / (n_eff - rank X)`` over ``w > 0``."""
    lk = Link(link)
    pos = design.weights > 0
    X = design.x_fixed[pos]
    rank = np.linalg.matrix_rank(X)
    n_eff = int(pos.sum())
    if n_eff <= rank:
        raise InsufficientSampleError("insufficient effective sample for dispersion estimate")
    mu = np.asarray(mu_hat, dtype=float)[pos]
    resid = design.y[pos] - mu
    phi = float(np.sum(design.weights[pos] * resid**2 / _variance_fn(lk, mu)) / (n_eff - rank))
    if phi <= 0:
        warnings.warn("dispersion estimate is 0 (perfect fit)", stacklevel=2)
        return 0.0
    return phi


class _CovParam:
    """Maps the variance-parameter vector ``tau`` to ``G`` and its derivatives."""

    def __init__(self, random_labels: Sequence[Param], structure: CovStructure):
        self.m = len(random_labels)
        self.structure = structure
        if structure is CovStructure.DIAGONAL:
            self.entries = [(i, i) for i in range(self.m)]
        else:
            self.entries = []
            by_arm: dict[int, list[int]] = {}
            for i, lab in enumerate(random_labels):
                by_arm.setdefault(lab.arm, []).append(i)
            for idx in by_arm.values():
                for a in range(len(idx)):
                    for b in range(a + 1):
                        self.entries.append((idx[a], idx[b]))
        self.size = len(self.entries)

    def bounds(self):
        return [(0.0, None) if r == c else (None, None) for r, c in self.entries]

    def is_variance(self) -> np.ndarray:
        return np.array([r == c for r, c in self.entries])

    def G(self, tau) -> np.ndarray:
        if self.structure is CovStructure.DIAGONAL:
            return np.diag(tau)
        L = self._L(tau)
        return L @ L.T

    def _L(self, tau):
        L = np.zeros((self.m, self.m))
        for t, (r, c) in zip(tau, self.entries):
            L[r, c] = t
        return L

    def chain(self, dG: np.ndarray, tau) -> np.ndarray:
        """Gradient with respect to ``tau`` given ``d/dG`` (symmetric)."""
        if self.structure is CovStructure.DIAGONAL:
            return np.diag(dG).copy()
        dL = 2.0 * dG @ self._L(tau)
        return np.array([dL[r, c] for r, c in self.entries])

    def start(self, variance: float) -> np.ndarray:
        if self.structure is CovStructure.DIAGONAL:
            return np.full(self.size, variance)
        return np.array([np.sqrt(variance) if r == c else 0.0 for r, c in self.entries])


@dataclass
class WorkingStats:
    """Per-study sufficient statistics of the working linear mixed model.

    ``A = X'QX``, ``a = X'QY*``, ``s = Y*'QY*`` and ``logdet_q = sum log q``;
    the random-effect blocks are column subsets of these.
    """

    A: np.ndarray  # (J, p, p)
    a: np.ndarray  # (J, p)
    s: np.ndarray  # (J,)
    logdet_q: float
    random_cols: np.ndarray

    @classmethod
    def compute(cls, X, ystar, q, groups, random_cols):
        p = X.shape[1]
        J = len(groups)
        A = np.empty((J, p, p))
        a = np.empty((J, p))
        s = np.empty(J)
        for j, rows in enumerate(groups):
            Xj = X[rows]
            qj = q[rows]
            XQ = Xj * qj[:, None]
            A[j] = XQ.T @ Xj
            a[j] = XQ.T @ ystar[rows]
            s[j] = np.sum(qj * ystar[rows] ** 2)
        return cls(A, a, s, float(np.sum(np.log(q))), np.asarray(random_cols))


@dataclass
class WorkingSolution:
    gamma: np.ndarray
    H: np.ndarray
    loglik: float
    u: np.ndarray  # (J, m) Z_j' V_j^-1 (Y*_j - X_j gamma)
    dG: np.ndarray  # d loglik / d G
    jitter: float


def _solve_h(H: np.ndarray):
    try:
        return linalg.cho_factor(H), 0.0
    except linalg.LinAlgError:
        jitter = 1e-10 * np.trace(H) / H.shape[0]
        return linalg.cho_factor(H + jitter * np.eye(H.shape[0])), jitter


def working_solution(stats: WorkingStats, G: np.ndarray, want_grad: bool = True) -> WorkingSolution:
    """REML quantities of the working model at random-effect covariance ``G``."""
    rc = stats.random_cols
    A, a = stats.A, stats.a
    J, p, _ = A.shape
    m = rc.size
    B = A[:, :, rc]  # X'QZ
    C = A[:, rc][:, :, rc]  # Z'QZ
    b = a[:, rc]  # Z'QY*
    I_m = np.eye(m)
    if m:
        IGC = I_m[None] + G[None] @ C
        # M = (I + G C)^-1 G = (G^-1 + Z'QZ)^-1, valid for singular G
        M = np.linalg.solve(IGC, np.broadcast_to(G, (J, m, m)))
        M = (M + np.transpose(M, (0, 2, 1))) / 2
        sign, logdet_igc = np.linalg.slogdet(IGC)
        if np.any(sign <= 0):
            raise np.linalg.LinAlgError("I + G Z'QZ is not positive definite")
        BM = B @ M
        H = (A - BM @ np.transpose(B, (0, 2, 1))).sum(axis=0)
        h = (a - np.einsum("jpm,jm->jp", BM, b)).sum(axis=0)
    else:
        logdet_igc = np.zeros(J)
        H = A.sum(axis=0)
        h = a.sum(axis=0)
    H = (H + H.T) / 2
    Hc, jitter = _solve_h(H)
    gamma = linalg.cho_solve(Hc, h)

    eQe = stats.s - 2 * a @ gamma + np.einsum("p,jpq,q->j", gamma, A, gamma)
    if m:
        zqe = b - np.einsum("jpm,p->jm", B, gamma)
        Mzqe = np.einsum("jab,jb->ja", M, zqe)
        quad = np.sum(eQe) - np.sum(zqe * Mzqe)
        u = zqe - np.einsum("jab,jb->ja", C, Mzqe)
    else:
        quad = np.sum(eQe)
        u = np.zeros((J, 0))
    logdet_v = -stats.logdet_q + np.sum(logdet_igc)
    logdet_h = 2.0 * np.sum(np.log(np.diag(Hc[0])))
    loglik = -0.5 * (logdet_v + quad + logdet_h)

    dG = np.zeros((m, m))
    if want_grad and m:
        CM = C @ M
        ZVZ = C - CM @ C
        W = B - B @ M @ C  # X'V^-1 Z
        Hinv = linalg.cho_solve(Hc, np.eye(p))
        WHW = np.transpose(W, (0, 2, 1)) @ Hinv[None] @ W
        omega = np.einsum("ja,jb->ab", u, u) - ZVZ.sum(axis=0) + WHW.sum(axis=0)
        dG = (omega + omega.T) / 4
    return WorkingSolution(gamma, H, float(loglik), u, dG, jitter)


def reml_score(stats: WorkingStats, cov: _CovParam, tau) -> np.ndarray:
    """Gradient of the working REML log-likelihood with respect to ``tau``."""
    sol = working_solution(stats, cov.G(tau))
    return cov.chain(sol.dG, tau)


def _study_groups(study_index):
    order = np.argsort(study_index, kind="stable")
    bounds = np.flatnonzero(np.diff(study_index[order])) + 1
    return np.split(order, bounds)


def _projected_gradient(grad, tau, cov: _CovParam) -> np.ndarray:
    """Ascent gradient with components pushing variances below 0 zeroed."""
    g = np.array(grad, dtype=float)
    at_floor = cov.is_variance() & (tau <= 0) & (g < 0)
    g[at_floor] = 0.0
    return g


def _inner_reml(stats, cov: _CovParam, tau0, tol):
    # log|Q| is constant in tau; dropping it keeps the objective well scaled
    offset = 0.5 * stats.logdet_q

    def objective(tau):
        try:
            sol = working_solution(stats, cov.G(tau))
        except (np.linalg.LinAlgError, linalg.LinAlgError):
            return 1e20, np.zeros_like(tau)
        return -(sol.loglik - offset), -cov.chain(sol.dG, tau)

    res = optimize.minimize(
        objective,
        tau0,
        method="L-BFGS-B",
        jac=True,
        bounds=cov.bounds(),
        options={"maxiter": 1000, "ftol": 1e-15, "gtol": tol},
    )
    tau = np.where(cov.is_variance(), np.maximum(res.x, 0.0), res.x)
    pg = _projected_gradient(reml_score(stats, cov, tau), tau, cov)
    ok = bool(res.success) or np.max(np.abs(pg)) <= max(tol, 1e-6 * max(1.0, abs(res.fun)))
    return tau, ok


def pql_fit(
    design: MixedDesign,
    link: str = "log",
    cov_structure: CovStructure | str = CovStructure.DIAGONAL,
    phi: float | None = 1.0,
    max_iter: int = 200,
    tol: float = 1e-6,
    inner_tol: float = 1e-8,
    start_variance: float = 0.05,
) -> PqlFit:
    """Fit the one-stage model by penalized quasi-likelihood.

    Parameters
    ----------
    design : MixedDesign
        Output of :func:`assemble_design`.
    link : {"log", "identity"}
        Link function; the variance function is ``v(mu) = mu`` for the log
        link and ``v(mu) = 1`` for the identity link.
    cov_structure : {"diagonal", "arm"}
        Structure of the per-study random-effect covariance.
    phi : float or None
        Fixed dispersion. ``None`` re-estimates the Pearson dispersion after
        every outer iteration.
    max_iter, tol
        Outer iterations and tolerance on the relative change of
        ``(gamma, tau)``.
    inner_tol
        Projected-gradient tolerance of the inner REML maximization.
    """
    lk = Link(link)
    cov_structure = CovStructure(cov_structure)
    keep = design.weights > 0
    X = design.x_fixed[keep]
    y = design.y[keep]
    w = design.weights[keep]
    sidx = design.study_index[keep]
    groups = _study_groups(sidx)
    present = np.unique(sidx)
    if present.size != design.n_studies:
        raise RmstNmaError("every study needs at least one positive-weight row")
    rc = design.random_cols
    m = rc.size
    cov = _CovParam(design.random_labels, cov_structure)
    estimate_phi = phi is None

    glm = fit_ipcw_rmst(X, y, w, link=lk.name, labels=design.labels)
    gamma = glm.coefficients
    tau = cov.start(start_variance) if m else np.zeros(0)
    r = np.zeros((design.n_studies, m))
    phi_val = 1.0 if estimate_phi else float(phi)
    if estimate_phi:
        phi_val = max(estimate_dispersion(design, lk.inverse(design.x_fixed @ gamma), lk.name), 1e-12)

    converged = False
    inner_ok = True
    jitter = 0.0
    it = 0
    for it in range(1, max_iter + 1):
        eta = X @ gamma + np.einsum("ia,ia->i", X[:, rc], r[sidx]) if m else X @ gamma
        mu = lk.inverse(eta)
        dmu = lk.inverse_deriv(eta)
        ystar = eta + (y - mu) / dmu
        q = w * dmu**2 / (phi_val * _variance_fn(lk, mu))
        stats = WorkingStats.compute(X, ystar, q, groups, rc)
        if m:
            tau_new, inner_ok = _inner_reml(stats, cov, tau, inner_tol)
        else:
            tau_new = tau
        G = cov.G(tau_new) if m else np.zeros((0, 0))
        sol = working_solution(stats, G, want_grad=False)
        jitter = max(jitter, sol.jitter)
        r_new = sol.u @ G if m else r
        old = np.concatenate([gamma, tau])
        new = np.concatenate([sol.gamma, tau_new])
        change = np.max(np.abs(new - old)) / max(1.0, np.max(np.abs(new)))
        gamma, tau, r = sol.gamma, tau_new, r_new
        if estimate_phi:
            eta = X @ gamma + (np.einsum("ia,ia->i", X[:, rc], r[sidx]) if m else 0.0)
            mu_full = np.zeros(design.y.size)
            mu_full[keep] = lk.inverse(eta)
            phi_val = max(estimate_dispersion(design, np.where(keep, mu_full, design.y), lk.name), 1e-12)
        logger.debug("pql iteration %d: change %.3g", it, change)
        if change < tol:
            converged = True
            break

    G = cov.G(tau) if m else np.zeros((0, 0))
    gamma_cov = linalg.inv(sol.H)
    gamma_cov = (gamma_cov + gamma_cov.T) / 2
    variance_mask = cov.is_variance() if m else np.zeros(0, dtype=bool)
    boundary = [design.random_labels[cov.entries[i][0]] for i in np.flatnonzero(variance_mask & (tau <= 0))]
    full_r = np.zeros((design.n_studies, m))
    full_r[: r.shape[0]] = r
    return PqlFit(
        gamma=gamma,
        gamma_cov=gamma_cov,
        r_hat=full_r,
        tau=tau,
        D_block=G,
        phi=phi_val,
        converged=converged and inner_ok,
        iterations=it,
        labels=list(design.labels),
        random_labels=design.random_labels,
        boundary=boundary,
        diagnostics={
            "jitter": jitter,
            "inner_converged": inner_ok,
            "working_response": ystar,
            "working_weights": q,
            "rows_used": np.flatnonzero(keep),
        },
    )
