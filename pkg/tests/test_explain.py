import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from milsurv.errors import ValidationError
from milsurv.explain import (
    ClusterModel,
    assign,
    clinico_regression,
    cluster_prototype_map,
    forward_stepwise,
    kmeans_fit,
    ols_fit,
    patch_cluster_scores,
    quantitate,
    quantitation_matrix,
    quantitation_regression,
    rank_clusters,
    select_k,
)
from milsurv.records import CovariateMatrix
from milsurv.synth import GeneratorConfig, generate

NO_COV = {"age": 0.0, "stage": 0.0, "grade": 0.0, "sex": 0.0}


# k-means ----------------------------------------------------------------------


def test_kmeans_single_cluster_is_mean():
    x = np.random.default_rng(0).normal(size=(50, 3))
    m = kmeans_fit(x, 1)
    assert np.allclose(m.centroids[0], x.mean(axis=0))


def test_kmeans_k_points():
    x = np.array([[0.0, 0.0], [5.0, 1.0], [-3.0, 2.0], [1.0, -4.0]])
    m = kmeans_fit(x, 4, seed=3)
    assert m.inertia_history[-1] == 0.0
    assert sorted(map(tuple, m.centroids.tolist())) == sorted(map(tuple, x.tolist()))


def test_kmeans_recovers_blobs():
    rng = np.random.default_rng(1)
    means = np.array([[0.0, 0.0, 0.0], [6.0, -4.0, 2.0]])
    x = np.vstack([rng.normal(means[0], 1.0, (5000, 3)), rng.normal(means[1], 1.0, (5000, 3))])
    m = kmeans_fit(x, 2, seed=0)
    got = m.centroids[np.argsort(m.centroids[:, 0])]
    assert np.max(np.abs(got - means)) < 0.1


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 6))
def test_kmeans_inertia_nonincreasing(seed, k):
    x = np.random.default_rng(seed).normal(size=(60, 2))
    hist = kmeans_fit(x, k, seed=seed).inertia_history
    assert all(b <= a + 1e-9 for a, b in zip(hist, hist[1:]))


def test_kmeans_deterministic_and_errors():
    x = np.random.default_rng(2).normal(size=(200, 4))
    assert np.array_equal(kmeans_fit(x, 5, seed=9).centroids, kmeans_fit(x, 5, seed=9).centroids)
    with pytest.raises(ValidationError):
        kmeans_fit(x[:3], 4)
    with pytest.raises(ValidationError):
        kmeans_fit(x, 0)


def test_kmeans_duplicate_points():
    x = np.vstack([np.zeros((10, 2)), np.ones((10, 2))])
    m = kmeans_fit(x, 3, seed=0)
    assert m.k == 3 and np.isfinite(m.centroids).all()


# assignment and quantitation ----------------------------------------------------


def test_assign_examples():
    c = np.zeros((10, 2))
    c[:, 0] = np.arange(10) * 10.0
    model = ClusterModel(c, 10)
    assert assign(model, c).tolist() == list(range(10))
    # the query is equidistant from centroids 3 and 7 and far from the rest
    c2 = c + 100.0
    c2[3] = [0.0, 1.0]
    c2[7] = [0.0, -1.0]
    assert assign(ClusterModel(c2, 10), [[0.0, 0.0]]).tolist() == [3]
    assert assign(model, np.zeros((0, 2))).size == 0
    with pytest.raises(ValidationError):
        assign(model, np.zeros((2, 3)))


def test_quantitate_examples():
    assert quantitate("a", [0, 0, 0], 4).percentages.tolist() == [100.0, 0.0, 0.0, 0.0]
    assert quantitate("a", [0, 2, 1, 1], 3).percentages[2] == 25.0
    a = np.random.default_rng(0).integers(0, 5, 40)
    q = quantitate("a", a, 5).percentages
    assert np.array_equal(q, quantitate("a", a[::-1], 5).percentages)
    assert q.sum() == pytest.approx(100.0)
    with pytest.raises(ValidationError):
        quantitate("a", [], 3)
    with pytest.raises(ValidationError):
        quantitate("a", [5], 3)


# OLS --------------------------------------------------------------------------


def test_ols_exact_fit():
    rng = np.random.default_rng(0)
    x = rng.normal(size=40)
    fit = ols_fit(CovariateMatrix.numeric({"x": x}), 2.5 * x - 1.0)
    assert fit.coef("x") == pytest.approx(2.5, abs=1e-12)
    assert fit.intercept == pytest.approx(-1.0, abs=1e-12)
    assert fit.r2 == pytest.approx(1.0) and fit.adjusted_r2 == pytest.approx(1.0)


def test_ols_null_adjusted_r2():
    rng = np.random.default_rng(1)
    x = CovariateMatrix.numeric({f"f{j}": rng.normal(size=1000) for j in range(5)})
    fit = ols_fit(x, rng.normal(size=1000))
    assert -0.05 <= fit.adjusted_r2 <= 0.05


def test_ols_collinear_and_shape_errors():
    rng = np.random.default_rng(2)
    a = rng.normal(size=30)
    with pytest.raises(ValidationError, match="collinear features"):
        ols_fit(CovariateMatrix.numeric({"a": a, "b": a.copy()}), rng.normal(size=30))
    with pytest.raises(ValidationError):
        ols_fit(CovariateMatrix.numeric({"a": a}), rng.normal(size=29))
    with pytest.raises(ValidationError):
        ols_fit(CovariateMatrix.numeric({"a": a[:2]}), [1.0, 2.0])


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_ols_residuals_orthogonal(seed):
    rng = np.random.default_rng(seed)
    n, p = int(rng.integers(8, 40)), int(rng.integers(1, 4))
    x = CovariateMatrix.numeric({f"f{j}": rng.normal(size=n) for j in range(p)})
    y = rng.normal(size=n)
    fit = ols_fit(x, y)
    design = np.column_stack([np.ones(n), x.values])
    assert np.max(np.abs(design.T @ fit.residuals)) < 1e-9
    assert fit.adjusted_r2 <= fit.r2 + 1e-15
    assert np.all((0 <= fit.p_values) & (fit.p_values <= 1))


def test_ols_matches_lstsq():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(50, 3))
    y = x @ [1.0, -2.0, 0.5] + rng.normal(size=50)
    fit = ols_fit(CovariateMatrix.numeric({f"f{j}": x[:, j] for j in range(3)}), y)
    ref, *_ = np.linalg.lstsq(np.column_stack([np.ones(50), x]), y, rcond=None)
    assert np.allclose(np.r_[fit.intercept, fit.coefficients], ref, atol=1e-10)


# stepwise ---------------------------------------------------------------------


def test_stepwise_perfect_feature_first():
    rng = np.random.default_rng(5)
    cols = {f"f{j}": rng.normal(size=60) for j in range(4)}
    res = forward_stepwise(CovariateMatrix.numeric(cols), 3.0 * cols["f2"], n_select=2)
    assert res.selected[0] == "f2"


def adjusted_r2_of(cols, names, y):
    return ols_fit(CovariateMatrix.numeric({n: cols[n] for n in names}), y).adjusted_r2


def test_stepwise_two_signal_features_match_best_pair():
    rng = np.random.default_rng(6)
    n = 200
    cols = {f"f{j}": rng.normal(size=n) for j in range(5)}
    y = cols["f1"] + cols["f3"] + 0.3 * rng.normal(size=n)
    res = forward_stepwise(CovariateMatrix.numeric(cols), y, n_select=2)
    best_pair = max(itertools.combinations(cols, 2), key=lambda pair: adjusted_r2_of(cols, pair, y))
    assert set(res.selected) == set(best_pair) == {"f1", "f3"}
    assert res.history[-1] == pytest.approx(adjusted_r2_of(cols, best_pair, y))


def test_stepwise_all_features_reproduces_full_fit():
    rng = np.random.default_rng(7)
    cols = {f"f{j}": rng.normal(size=50) for j in range(5)}
    y = rng.normal(size=50)
    x = CovariateMatrix.numeric(cols)
    res = forward_stepwise(x, y, n_select=5)
    assert sorted(res.selected) == sorted(cols)
    assert res.fit.r2 == pytest.approx(ols_fit(x, y).r2)
    with pytest.raises(ValidationError):
        forward_stepwise(x, y, n_select=6)


# clinical and cluster regressions ---------------------------------------------------


def covariate_rows(n, seed):
    rng = np.random.default_rng(seed)
    return [
        {"age": float(rng.integers(40, 90)), "sex": float(rng.integers(0, 2)),
         "stage": float(rng.integers(1, 4)), "grade": float(rng.integers(1, 4))}
        for _ in range(n)
    ]


def test_clinico_age_decade_coefficient():
    rows = covariate_rows(200, 0)
    age = np.array([r["age"] for r in rows])
    fit = clinico_regression(rows, 0.5 * (age - age.mean()) / 10.0)
    assert fit.coef("age") == pytest.approx(0.5, abs=1e-10)
    assert abs(fit.coef("sex=1")) < 1e-10


def test_clinico_null_scores():
    rows = covariate_rows(1000, 1)
    fit = clinico_regression(rows, np.random.default_rng(2).normal(size=1000))
    assert abs(fit.adjusted_r2) < 0.02


def test_clinico_constant_column():
    rows = covariate_rows(50, 3)
    for r in rows:
        r["sex"] = 1.0
    with pytest.raises(ValidationError, match="constant column"):
        clinico_regression(rows, np.random.default_rng(0).normal(size=50))


def test_quantitation_regression_drops_reference():
    rng = np.random.default_rng(8)
    quants = [quantitate(str(i), rng.integers(0, 4, 20), 4) for i in range(40)]
    q = quantitation_matrix(quants)
    fit = quantitation_regression(q, q.values[:, 0] + rng.normal(size=40))
    assert fit.names == ("cluster_0", "cluster_1", "cluster_2")


# patch-level cluster scores -------------------------------------------------------


def test_patch_cluster_scores_constant():
    c = np.array([0, 0, 2, 2, 2])
    res = patch_cluster_scores(np.full(5, 1.25), c, ["a", "b", "a", "b", "b"], k=3, n_samples=200)
    for r in (res[0], res[2]):
        assert (r.mean, r.q25, r.q75, r.ci_lower, r.ci_upper) == (1.25,) * 5
    assert not res[1].present and res[1].mean is None


def test_patch_cluster_scores_single_slide():
    s = np.array([0.1, 0.5, 0.9, 2.0])
    res = patch_cluster_scores(s, [0, 0, 0, 0], ["x"] * 4, n_samples=200)
    assert res[0].ci_lower == res[0].ci_upper == pytest.approx(s.mean())
    with pytest.raises(ValidationError):
        patch_cluster_scores([], [], [])
    with pytest.raises(ValidationError):
        patch_cluster_scores([1.0], [0, 1], ["x"])


def test_rank_clusters_orders_by_mean():
    res = patch_cluster_scores([1.0, 3.0, 2.0, 3.0], [0, 1, 2, 3], ["a"] * 4, n_samples=50)
    assert [r.cluster for r in rank_clusters(res)] == [1, 3, 2, 0]


def test_planted_cluster_has_highest_mean():
    co = generate(GeneratorConfig(n_cases=150, heatmaps=False, seed=1, covariate_betas=NO_COV))
    gt = co.ground_truth
    x = np.vstack([b.all_patches() for b in co.bags])
    protos = np.concatenate([gt.patch_prototypes[b.case_id] for b in co.bags])
    slides = np.concatenate([b.slide_ids() for b in co.bags])
    rng = np.random.default_rng(0)
    scores = gt.betas[protos] + 0.3 * rng.normal(size=protos.size)
    model = kmeans_fit(x, 8, seed=0)
    ids = assign(model, x)
    top = rank_clusters(patch_cluster_scores(scores, ids, slides, k=8, n_samples=100))[0]
    mapping = cluster_prototype_map(ids, protos, 8, gt.betas.size)
    assert mapping[top.cluster] == gt.high_risk_prototype


def test_cluster_prototype_map():
    m = cluster_prototype_map([0, 0, 0, 2, 2], [1, 1, 0, 3, 3], k=3, n_prototypes=4)
    assert m.tolist() == [1, -1, 3]


# choosing k ------------------------------------------------------------------


def test_select_k_single_candidate():
    x = np.random.default_rng(0).normal(size=(300, 2))
    patches = [x[i * 10 : (i + 1) * 10] for i in range(30)]
    k, scores = select_k(x, patches, np.random.default_rng(1).normal(size=30), candidates=(4,))
    assert k == 4 and set(scores) == {4}


def test_select_k_never_picks_too_few_clusters():
    co = generate(GeneratorConfig(n_cases=300, heatmaps=False, seed=2, covariate_betas=NO_COV))
    gt = co.ground_truth
    by_id = {b.case_id: b for b in co.bags}
    fit_x = np.vstack([by_id[r.case_id].all_patches() for r in co.records if r.split == "train"])
    tune = [r for r in co.records if r.split == "tune"]
    idx = {cid: i for i, cid in enumerate(gt.case_ids)}
    y = np.array([gt.eta[idx[r.case_id]] for r in tune])
    patches = [by_id[r.case_id].all_patches() for r in tune]
    k, scores = select_k(fit_x, patches, y, candidates=(2, 8, 64), seed=0)
    assert k in (8, 64)
    assert scores[8] > scores[2]
    assert select_k(fit_x, patches, y, candidates=(2, 8, 64), seed=0) == (k, scores)
