"""Estimator unit tests: logistic MLE, marginal effects, IV machinery."""

import math
import tempfile

import numpy as np
import pandas as pd
import pytest

from deductible_iv import cohort, estimation
from deductible_iv.estimation import (
    INSTRUMENT,
    RESIDUAL,
    TREATMENT,
    CollinearityError,
    DesignMatrix,
    SeparationError,
    UnknownRegressorError,
    build_design,
    cluster_bootstrap,
    estimate_2sri,
    first_stage,
    fit_logit,
    marginal_effect,
    naive_logit,
    placebo_test,
    second_stage_2sri,
    two_stage_least_squares,
    wald_ratio,
)
from deductible_iv.generator import GeneratorConfig, export_dataset, generate_with_truth, load_dataset


def design_from_arrays(X, y, names=None, clusters=None):
    X = np.asarray(X, float)
    names = names or [f"x{j}" for j in range(X.shape[1])]
    clusters = np.arange(len(y)) if clusters is None else clusters
    return DesignMatrix(X=X, y=np.asarray(y, float), names=names, cluster_ids=clusters)


def random_design(rng, n=300, p=4):
    X = np.column_stack([np.ones(n), rng.standard_normal((n, p - 1))])
    beta = rng.uniform(-1, 1, size=p)
    probs = 1.0 / (1.0 + np.exp(-(X @ beta)))
    y = (rng.random(n) < probs).astype(float)
    return design_from_arrays(X, y)


@pytest.fixture(scope="module")
def matrix():
    pop = generate_with_truth(GeneratorConfig(n_families=10_000, seed=314, family_injury_rate=0.15))
    with tempfile.TemporaryDirectory() as d:
        export_dataset(pop, d)
        frames = load_dataset(d)
    rows, _ = cohort.build_cohort(frames["members"], frames["encounters"], frames["injuries"])
    return rows


class TestLogitMLE:
    def test_gradient_matches_finite_differences(self):
        """Analytic score equals a central finite difference of the
        log-likelihood at random parameter points, to 1e-6 relative."""
        rng = np.random.default_rng(99)
        design = random_design(rng, n=400, p=5)
        X, y = design.X, design.y
        w = np.ones(len(y))
        h = 1e-6
        for _ in range(10):
            beta = rng.uniform(-2, 2, size=X.shape[1])
            mu = 1.0 / (1.0 + np.exp(-(X @ beta)))
            grad = X.T @ (y - mu)
            for j in range(len(beta)):
                bp, bm = beta.copy(), beta.copy()
                bp[j] += h
                bm[j] -= h
                fd = (
                    estimation._log_likelihood(y, X @ bp, w)
                    - estimation._log_likelihood(y, X @ bm, w)
                ) / (2 * h)
                denom = max(abs(fd), abs(grad[j]), 1.0)
                assert abs(grad[j] - fd) / denom < 1e-6

    def test_two_by_two_exact_log_odds(self):
        """With one binary regressor the MLE slope is the sample log-odds
        ratio in closed form."""
        # cell counts: x=0 -> 30/70 events, x=1 -> 55/45
        x = np.r_[np.zeros(100), np.ones(100)]
        y = np.r_[np.ones(30), np.zeros(70), np.ones(55), np.zeros(45)]
        design = design_from_arrays(np.column_stack([np.ones(200), x]), y)
        fit = fit_logit(design)
        want_intercept = math.log(30 / 70)
        want_slope = math.log(55 / 45) - want_intercept
        assert abs(fit.beta[0] - want_intercept) < 1e-8
        assert abs(fit.beta[1] - want_slope) < 1e-8

    def test_intercept_only_balanced(self):
        y = np.r_[np.ones(50), np.zeros(50)]
        design = design_from_arrays(np.ones((100, 1)), y)
        fit = fit_logit(design)
        assert abs(fit.beta[0]) < 1e-10
        assert fit.converged

    def test_fitted_mean_matches_sample_mean(self):
        rng = np.random.default_rng(5)
        design = random_design(rng)
        fit = fit_logit(design)
        mu = 1.0 / (1.0 + np.exp(-(design.X @ fit.beta)))
        assert abs(mu.mean() - design.y.mean()) < 1e-10

    def test_score_orthogonality_at_optimum(self):
        rng = np.random.default_rng(6)
        design = random_design(rng, n=500, p=6)
        fit = fit_logit(design)
        mu = 1.0 / (1.0 + np.exp(-(design.X @ fit.beta)))
        score = design.X.T @ (design.y - mu)
        assert np.max(np.abs(score)) < 1e-8

    def test_weights_equal_row_duplication(self):
        rng = np.random.default_rng(7)
        design = random_design(rng, n=120, p=3)
        w = rng.integers(1, 4, size=120).astype(float)
        weighted = fit_logit(design, weights=w)
        X_dup = np.repeat(design.X, w.astype(int), axis=0)
        y_dup = np.repeat(design.y, w.astype(int))
        duplicated = fit_logit(design_from_arrays(X_dup, y_dup))
        assert np.allclose(weighted.beta, duplicated.beta, atol=1e-8)

    def test_perfect_separation_raises(self):
        x = np.r_[np.zeros(50), np.ones(50)]
        design = design_from_arrays(np.column_stack([np.ones(100), x]), x)
        with pytest.raises(SeparationError):
            fit_logit(design)

    def test_degenerate_response_raises(self):
        design = design_from_arrays(np.ones((50, 1)), np.ones(50))
        with pytest.raises(SeparationError):
            fit_logit(design)

    def test_collinear_design_raises(self):
        rng = np.random.default_rng(8)
        base = random_design(rng, n=100, p=3)
        X = np.column_stack([base.X, base.X[:, 1] * 2.0])
        with pytest.raises(CollinearityError):
            fit_logit(design_from_arrays(X, base.y))

    def test_more_params_than_rows_raises(self):
        with pytest.raises(CollinearityError):
            fit_logit(design_from_arrays(np.eye(3), np.array([0.0, 1.0, 0.0])))


class TestMarginalEffect:
    def test_matches_direct_computation(self):
        rng = np.random.default_rng(9)
        design = random_design(rng, n=400, p=3)
        x_bin = (rng.random(400) < 0.4).astype(float)
        design = DesignMatrix(
            X=np.column_stack([design.X, x_bin]),
            y=design.y,
            names=design.names + ["d"],
            cluster_ids=design.cluster_ids,
        )
        fit = fit_logit(design)
        me = marginal_effect(fit, design, "d")
        xbar = design.X.mean(axis=0)
        on, off = xbar.copy(), xbar.copy()
        on[-1], off[-1] = 1.0, 0.0
        want = 100.0 * (
            1 / (1 + math.exp(-on @ fit.beta)) - 1 / (1 + math.exp(-off @ fit.beta))
        )
        assert abs(me - want) < 1e-10

    def test_invariant_to_covariate_scaling(self):
        """Rescaling a covariate rescales its coefficient but leaves the
        treatment marginal effect untouched."""
        rng = np.random.default_rng(10)
        n = 500
        z = rng.standard_normal(n)
        d = (rng.random(n) < 0.5).astype(float)
        probs = 1 / (1 + np.exp(-(-0.3 + 0.8 * d + 0.5 * z)))
        y = (rng.random(n) < probs).astype(float)
        base = design_from_arrays(
            np.column_stack([np.ones(n), d, z]), y, names=["intercept", "d", "z"]
        )
        scaled = design_from_arrays(
            np.column_stack([np.ones(n), d, z * 1000.0]), y, names=["intercept", "d", "z"]
        )
        me1 = marginal_effect(fit_logit(base), base, "d")
        me2 = marginal_effect(fit_logit(scaled), scaled, "d")
        assert abs(me1 - me2) < 1e-10

    def test_unknown_regressor(self):
        rng = np.random.default_rng(11)
        design = random_design(rng)
        fit = fit_logit(design)
        with pytest.raises(UnknownRegressorError):
            marginal_effect(fit, design, "ghost")


class TestBuildDesign:
    def test_reference_levels_absent(self, matrix):
        design = build_design(matrix, "deductible_met", main=(INSTRUMENT,))
        for ref in ("race_white", "age_18_26", "elixhauser_0", "deductible_band_0", "family_size_3"):
            assert ref not in design.names
        assert design.names[0] == "intercept"
        assert design.names[1] == INSTRUMENT
        assert "yost_index" in design.names

    def test_constant_dummies_dropped(self, matrix):
        women = matrix[matrix["sex"] == "female"]
        narrow = women[women["age"] <= 30]
        design = build_design(narrow, "deductible_met", main=(INSTRUMENT,))
        assert "age_41_50" in design.dropped or "age_41_50" not in design.names

    def test_constant_treatment_is_hard_error(self, matrix):
        rows = matrix.copy()
        rows["deductible_met"] = 1
        with pytest.raises(CollinearityError):
            build_design(rows, "y_emergency_department", main=(TREATMENT,))


class TestTwoStage:
    def test_zero_residual_degenerates_to_naive(self, matrix):
        """With an identically zero first-stage residual the 2SRI second
        stage is exactly the naive logit."""
        fit2, design2 = second_stage_2sri(
            matrix, np.zeros(len(matrix)), "emergency_department"
        )
        me2 = marginal_effect(fit2, design2, TREATMENT)
        me_naive, _ = naive_logit(matrix, "emergency_department")
        assert RESIDUAL not in design2.names
        assert abs(me2 - me_naive) < 1e-10

    def test_first_stage_residuals_centered(self, matrix):
        _, residuals, diag = first_stage(matrix)
        assert abs(residuals.mean()) < 1e-6
        assert diag["f_lpm"] > 100
        assert diag["chi2_z"] > 50
        assert 5 < diag["me_pp"] < 30

    def test_2sri_closer_to_oracle_than_naive(self, matrix):
        me_2sri, _ = estimate_2sri(matrix, "emergency_department")
        me_naive, _ = naive_logit(matrix, "emergency_department")
        # confounding biases the naive estimate upward; 2SRI removes most
        assert me_naive > me_2sri

    def test_wald_equals_2sls(self, matrix):
        """In the just-identified linear model the 2SLS coefficient is the
        Wald ratio, exactly."""
        for outcome in ("emergency_department", "wellness", "venipuncture"):
            tsls, _ = two_stage_least_squares(matrix, outcome)
            wald = wald_ratio(matrix, outcome)
            assert abs(tsls - wald) < 1e-10, outcome

    def test_2sls_close_to_2sri(self, matrix):
        me_2sri, _ = estimate_2sri(matrix, "emergency_department")
        tsls, info = two_stage_least_squares(matrix, "emergency_department")
        assert abs(me_2sri - tsls) < 5.0
        assert info["se_pp"] > 0


class TestPlacebo:
    def test_single_period_rejected(self, matrix):
        with pytest.raises(ValueError):
            placebo_test(matrix)

    def test_two_period_panel_p_value(self):
        pop = generate_with_truth(
            GeneratorConfig(n_families=2_500, seed=21, n_periods=2, family_injury_rate=0.15)
        )
        with tempfile.TemporaryDirectory() as d:
            export_dataset(pop, d)
            frames = load_dataset(d)
        rows, _ = cohort.build_cohort(frames["members"], frames["encounters"], frames["injuries"])
        p = placebo_test(rows)
        assert 0.0 <= p <= 1.0


class TestBootstrap:
    def test_deterministic_and_ci_brackets_point(self, matrix):
        res1 = cluster_bootstrap(matrix, "emergency_department", reps=40, seed=3)
        res2 = cluster_bootstrap(matrix, "emergency_department", reps=40, seed=3)
        assert res1.ci95 == res2.ci95
        assert res1.point_estimate_me == res2.point_estimate_me
        lo, hi = res1.ci95
        assert lo < hi
        assert res1.diagnostics["reps_completed"] == 40
        assert res1.diagnostics["first_stage_f"] > 100

    def test_seed_changes_ci(self, matrix):
        res1 = cluster_bootstrap(matrix, "emergency_department", reps=40, seed=3)
        res2 = cluster_bootstrap(matrix, "emergency_department", reps=40, seed=4)
        assert res1.ci95 != res2.ci95
        assert res1.point_estimate_me == res2.point_estimate_me  # point is full-sample

    def test_naive_estimator_supported(self, matrix):
        res = cluster_bootstrap(matrix, "wellness", estimator="naive", reps=30, seed=1)
        assert res.estimator == "naive"
        assert "first_stage_f" not in res.diagnostics

    def test_unknown_estimator(self, matrix):
        with pytest.raises(ValueError):
            cluster_bootstrap(matrix, "wellness", estimator="ols", reps=10, seed=1)

    def test_residuals_restored_after_bootstrap(self, matrix):
        """The in-place residual column swap must not leak replicate state."""
        a = cluster_bootstrap(matrix, "venipuncture", reps=15, seed=7)
        b = cluster_bootstrap(matrix, "venipuncture", reps=15, seed=7)
        assert a.ci95 == b.ci95
