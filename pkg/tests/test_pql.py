import numpy as np
import pytest

from oracles import block_z, dense_reml, gaussian_toy, grid_reml_variance, ipd_study
from rmstnma.ipcw import arm_design, build_weights, fit_ipcw_rmst, param_labels
from rmstnma.pql import (
    WorkingStats,
    _CovParam,
    _study_groups,
    assemble_design,
    estimate_dispersion,
    pql_fit,
    reml_score,
    working_solution,
)


def _toy_stats(rng, J=3, n=20):
    S = np.repeat(np.arange(J), n)
    Z = np.tile(np.arange(n) % 2, J)
    x = rng.binomial(1, 0.5, J * n)
    X = np.column_stack([Z == 0, Z == 1, (Z == 0) * x, (Z == 1) * x]).astype(float)
    ys = rng.standard_normal(J * n)
    q = rng.uniform(0.5, 2, J * n)
    return S, X, ys, q


def test_woodbury_matches_dense(rng):
    S, X, ys, q = _toy_stats(rng)
    stats = WorkingStats.compute(X, ys, q, _study_groups(S), np.arange(4))
    G = np.diag([0.3, 0.2, 0.1, 0.4])
    G[0, 1] = G[1, 0] = 0.05
    sol = working_solution(stats, G)
    Zd = block_z(S, X, 3)
    gamma, ll = dense_reml(X, Zd, ys, q, np.kron(np.eye(3), G))
    np.testing.assert_allclose(sol.gamma, gamma, atol=1e-12)
    assert sol.loglik == pytest.approx(ll, abs=1e-10)


def test_woodbury_handles_singular_G(rng):
    S, X, ys, q = _toy_stats(rng)
    stats = WorkingStats.compute(X, ys, q, _study_groups(S), np.arange(4))
    G = np.diag([0.3, 0.0, 0.1, 0.0])
    sol = working_solution(stats, G)
    gamma, ll = dense_reml(X, block_z(S, X, 3), ys, q, np.kron(np.eye(3), G))
    np.testing.assert_allclose(sol.gamma, gamma, atol=1e-12)
    assert sol.loglik == pytest.approx(ll, abs=1e-10)


def test_reml_gradient_matches_finite_differences(rng):
    S, X, ys, q = _toy_stats(rng)
    stats = WorkingStats.compute(X, ys, q, _study_groups(S), np.arange(4))
    G = np.diag([0.3, 0.2, 0.1, 0.4])
    sol = working_solution(stats, G)
    h = 1e-6
    for i in range(4):
        for k in range(i, 4):
            E = np.zeros((4, 4))
            E[i, k] = E[k, i] = h
            num = (working_solution(stats, G + E).loglik - working_solution(stats, G - E).loglik) / (2 * h)
            ana = sol.dG[i, k] * (1 if i == k else 2)
            assert ana == pytest.approx(num, rel=1e-5, abs=1e-8)


def test_no_random_effects_equals_ipcw_glm(rng):
    treatment, u, e, x = ipd_study(rng)
    design = assemble_design(np.zeros(u.size), treatment, u, e, x, 4.0, random_structure="none")
    fit = pql_fit(design)
    y, _, w = build_weights(u, e, 4.0)
    glm = fit_ipcw_rmst(arm_design(treatment, x, [0, 1]), y, w, labels=param_labels([0, 1], 1))
    assert fit.converged
    np.testing.assert_allclose(fit.gamma, glm.coefficients, atol=1e-6)


def test_identity_gaussian_matches_grid_reml():
    study, y = gaussian_toy()
    design = assemble_design(study, np.zeros(y.size, int), y, np.ones(y.size, int), np.zeros((y.size, 0)), 100.0,
                             random_structure="intercepts")
    fit = pql_fit(design, link="identity")
    X = np.ones((y.size, 1))
    Zd = block_z(study, X, 3)
    tau2 = grid_reml_variance(lambda v: dense_reml(X, Zd, y, np.ones(y.size), v * np.eye(3))[1])
    assert 0 < tau2 < 4.9  # interior optimum, so the grid bounds do not bind
    assert fit.D_block[0, 0] == pytest.approx(tau2, abs=1e-4)
    gamma, _ = dense_reml(X, Zd, y, np.ones(y.size), tau2 * np.eye(3))
    assert fit.gamma[0] == pytest.approx(gamma[0], abs=1e-4)
    # BLUPs: r = G Z'V^-1 (y - X gamma)
    V = np.eye(y.size) + Zd @ (fit.D_block[0, 0] * np.eye(3)) @ Zd.T
    blup = fit.D_block[0, 0] * Zd.T @ np.linalg.solve(V, y - fit.gamma[0])
    np.testing.assert_allclose(fit.r_hat[:, 0], blup, atol=1e-8)


def test_boundary_variance_has_nonpositive_score():
    rng = np.random.default_rng(8)
    study = np.repeat(np.arange(4), 25)
    y = 5.0 + rng.normal(size=study.size)
    # force identical study means so the between-study variance sits at 0
    for j in range(4):
        y[study == j] += 5.0 - y[study == j].mean()
    design = assemble_design(study, np.zeros(y.size, int), y, np.ones(y.size, int), np.zeros((y.size, 0)), 100.0,
                             random_structure="intercepts")
    fit = pql_fit(design, link="identity")
    assert fit.tau[0] == 0.0
    assert fit.boundary == design.random_labels
    stats = WorkingStats.compute(design.x_fixed, fit.diagnostics["working_response"],
                                 fit.diagnostics["working_weights"], _study_groups(design.study_index),
                                 design.random_cols)
    cov = _CovParam(design.random_labels, "diagonal")
    assert reml_score(stats, cov, fit.tau)[0] <= 1e-8


def test_one_stage_on_nma_data(small_nma):
    d = small_nma
    design = assemble_design(d.study, d.treatment, d.time, d.event, d.covariates, 4.0)
    assert design.z_random.shape == (len(d), 4 * 6)
    for structure in ("diagonal", "arm"):
        fit = pql_fit(design, cov_structure=structure)
        assert fit.converged
        assert fit.gamma_cov.shape == (6, 6)
        assert np.all(np.linalg.eigvalsh(fit.gamma_cov) > 0)
        assert np.all(np.linalg.eigvalsh(fit.D_block) >= -1e-12)
        assert fit.r_hat.shape == (4, 6)
        np.testing.assert_allclose(fit.gamma[:3], [0.69, 1.07, 0.88], atol=0.25)


def test_pearson_dispersion(small_nma):
    d = small_nma
    design = assemble_design(d.study, d.treatment, d.time, d.event, d.covariates, 4.0, random_structure="intercepts")
    fixed = pql_fit(design)
    pearson = pql_fit(design, phi=None)
    assert pearson.converged
    assert pearson.phi > 0 and pearson.phi != 1.0
    # the fixed effects barely depend on phi; their covariance scales with it
    np.testing.assert_allclose(pearson.gamma, fixed.gamma, atol=0.05)
    mu = np.exp(design.x_fixed @ fixed.gamma)
    assert estimate_dispersion(design, mu) > 0


def test_zero_weight_rows_are_ignored(rng):
    treatment, u, e, x = ipd_study(rng, n=300)
    design = assemble_design(np.repeat([0, 1, 2], 100), treatment, u, e, x, 4.0, random_structure="intercepts")
    fit = pql_fit(design)
    used = fit.diagnostics["rows_used"]
    np.testing.assert_array_equal(used, np.flatnonzero(design.weights > 0))
