import numpy as np
import pytest

from rmstnma.dataset import Dataset
from rmstnma.errors import RmstNmaError
from rmstnma.pipeline import Method, all_contrasts, contrast, fit
from rmstnma.simulation import GeneratorParams, ScenarioConfig, generate_dataset, true_estimands

FITS = [
    ("two-stage", {}),
    ("two-stage", {"center": True}),
    ("two-stage", {"structure": "diagonal"}),
    ("one-stage", {}),
    ("one-stage", {"random_structure": "intercepts", "cov_structure": "arm"}),
    ("one-stage", {"random_structure": "none"}),
    ("npf", {}),
]


def assert_consistent(model, points):
    for x in points:
        ab = contrast(model, "A", "B", x)
        bc = contrast(model, "B", "C", x)
        ac = contrast(model, "A", "C", x)
        assert abs(ab.log_rmst_diff + bc.log_rmst_diff - ac.log_rmst_diff) <= 1e-10
        ba = contrast(model, "B", "A", x)
        assert ba.log_rmst_diff == -ab.log_rmst_diff
        assert ba.se == pytest.approx(ab.se, rel=1e-12)


@pytest.fixture(scope="module")
def fitted(small_nma):
    return [(m, kw, fit(small_nma, m, 4.0, **kw)) for m, kw in FITS]


def test_consistency_on_every_model(fitted):
    for method, _, model in fitted:
        points = [None] if method == "npf" else [None, [0.0], [1.0], [0.37]]
        assert_consistent(model, points)


def test_contrast_matches_predictions(fitted):
    for method, _, model in fitted:
        x = None if method == "npf" else [1.0]
        a, _ = model.predict("A", x)
        c, _ = model.predict("C", x)
        est = contrast(model, "A", "C", x)
        assert est.log_rmst_diff == pytest.approx(a - c, abs=1e-12)
        assert est.rmst_ratio == pytest.approx(np.exp(a - c))
        assert est.ci_low < est.log_rmst_diff < est.ci_high
        assert 0 <= est.p_value <= 1


def test_all_contrasts_lists_each_pair_once(fitted):
    pairs = [(c.treatment_a, c.treatment_b) for c in all_contrasts(fitted[0][2])]
    assert pairs == [("A", "B"), ("A", "C"), ("B", "C")]


def test_methods_agree_roughly_with_truth(fitted):
    truth = true_estimands(GeneratorParams())
    for method, _, model in fitted:
        assert model.converged
        for k, name in enumerate("ABC"):
            x = None if method == "npf" else [0.0]
            point, se = model.predict(name, x)
            if method != "npf":
                assert abs(point - truth[k, 0]) < 4 * se + 0.05


def test_centering_does_not_change_predictions(fitted):
    plain = fitted[0][2]
    centered = fitted[1][2]
    assert centered.covariate_centers[0] == 0.0  # binary covariate stays uncentered under center=True
    explicit = fit(generate_dataset(ScenarioConfig.for_scenario("S1", n=300, nt=4, tau=0.1, replications=1, base_seed=11), 0),
                   "one-stage", 4.0, random_structure="none", center=["x"])
    none = fitted[5][2]
    assert explicit.covariate_centers[0] == pytest.approx(0.5, abs=0.05)
    for name in "ABC":
        for x in ([0.0], [1.0]):
            assert explicit.predict(name, x)[0] == pytest.approx(none.predict(name, x)[0], abs=1e-7)
            assert explicit.predict(name, x)[1] == pytest.approx(none.predict(name, x)[1], rel=1e-5)
            assert centered.predict(name, x)[0] == pytest.approx(plain.predict(name, x)[0], abs=1e-10)


def _relabel(data: Dataset, perm):
    labels = [None] * len(perm)
    for old, new in enumerate(perm):
        labels[new] = data.treatment_labels[old]
    return Dataset(data.study, np.asarray(perm)[data.treatment], data.time, data.event, data.covariates,
                   labels, data.covariate_names)


@pytest.mark.parametrize("method, kw, tol", [
    ("one-stage", {"random_structure": "none"}, 1e-10),
    ("two-stage", {}, 1e-6),
    ("npf", {}, 1e-6),
])
def test_relabeling_treatments_is_invariant(small_nma, method, kw, tol):
    relabeled = _relabel(small_nma, [2, 0, 1])
    # codes differ but labels still name the same arms
    assert relabeled.treatment_labels == ["B", "C", "A"]
    a = fit(small_nma, method, 4.0, **kw)
    b = fit(relabeled, method, 4.0, **kw)
    x = None if method == "npf" else [1.0]
    for name in "ABC":
        pa, sa = a.predict(name, x)
        pb, sb = b.predict(name, x)
        assert pa == pytest.approx(pb, abs=tol)
        assert sa == pytest.approx(sb, abs=tol)


def test_study_order_is_invariant(small_nma):
    order = np.argsort(-small_nma.study, kind="stable")
    shuffled = small_nma.subset(order)
    a = fit(small_nma, "two-stage", 4.0)
    b = fit(shuffled, "two-stage", 4.0)
    np.testing.assert_allclose(a.fixed_effects, b.fixed_effects, atol=1e-10)


def test_network_without_three_arm_trials(network3):
    for method in ("two-stage", "one-stage", "npf"):
        model = fit(network3, method, 4.0)
        assert len([lab for lab in model.labels if lab.is_intercept]) == 3
        assert_consistent(model, [None] if method == "npf" else [None, [1.0]])


def test_coefficient_table_layout(fitted):
    model = fitted[0][2]
    rows = model.coefficient_table()
    assert [r["parameter"] for r in rows] == ["A", "B", "C", "A:x", "B:x", "C:x"]
    for r in rows:
        assert r["ci_low"] < r["estimate"] < r["ci_high"]
        assert r["between_sd"] >= 0


def test_errors(small_nma):
    model = fit(small_nma, "two-stage", 4.0)
    with pytest.raises(RmstNmaError):
        contrast(model, "A", "Z")
    with pytest.raises(RmstNmaError):
        model.predict("A", [1.0, 2.0])
    one_study = small_nma.subset(small_nma.study == small_nma.study_ids[0])
    with pytest.raises(RmstNmaError, match="at least 2"):
        fit(one_study, "two-stage", 4.0)
    with pytest.raises(ValueError):
        fit(small_nma, "bayesian", 4.0)


def test_method_enum_round_trip():
    assert [Method(m.value) for m in Method] == list(Method)
