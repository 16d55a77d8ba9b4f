import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st_

from sitetransport import (
    TargetSpec,
    density_ratio_fit,
    doubly_robust_estimate,
    identity_map,
    ipw_estimate,
    naive_estimate,
    outcome_model_estimate,
    weighting_estimate,
)
from sitetransport.errors import (
    ConstraintViolationError,
    InsufficientArmError,
    SeparableDataError,
)
from sitetransport.estimators import _dr_point
from sitetransport.regression import fit_least_squares, fit_logistic

from conftest import build_site, random_site


class TestWeightingEstimate:
    def test_no_within_arm_variance(self):
        site = build_site(np.zeros((4, 1)), [1, 1, 0, 0], [3.0, 3.0, 1.0, 1.0])
        est = weighting_estimate(site, np.ones(4))
        assert est.estimate == pytest.approx(2.0)
        assert est.std_error == pytest.approx(0.0)

    def test_formula_evaluation(self):
        # n=4, Z=(1,1,0,0), pi=.5, gamma=(1.5,.5,1,1), Y=(4,2,1,3) -> 3.5 - 2 = 1.5
        site = build_site(np.zeros((4, 1)), [1, 1, 0, 0], [4.0, 2.0, 1.0, 3.0])
        gamma = np.array([1.5, 0.5, 1.0, 1.0])
        est = weighting_estimate(site, gamma)
        assert est.estimate == pytest.approx(1.5)
        # the two algebraic forms agree: single-sum display vs mean difference
        z, y, pi, n = site.treatment, site.outcomes, site.propensity, site.n
        display = float(np.sum(gamma * (z - pi) / (pi * (1 - pi)) * y)) / n
        assert est.estimate == pytest.approx(display)

    def test_constraint_violation(self):
        site = build_site(np.zeros((4, 1)), [1, 1, 0, 0], [4.0, 2.0, 1.0, 3.0])
        with pytest.raises(ConstraintViolationError):
            weighting_estimate(site, np.array([1.1, 1.1, 1.0, 1.0]))

    def test_sample_boundedness(self, rng):
        for _ in range(10):
            site = random_site(rng, n=20, d=2)
            gamma = rng.uniform(0, 3, site.n)
            z = site.treatment
            gamma[z == 1] *= site.n1 / gamma[z == 1].sum()
            gamma[z == 0] *= site.n0 / gamma[z == 0].sum()
            est = weighting_estimate(site, gamma)
            y1 = site.outcomes[z == 1]
            y0 = site.outcomes[z == 0]
            mu1 = float(np.sum(z * gamma * site.outcomes)) / site.n1
            mu0 = float(np.sum((1 - z) * gamma * site.outcomes)) / site.n0
            assert y1.min() - 1e-12 <= mu1 <= y1.max() + 1e-12
            assert y0.min() - 1e-12 <= mu0 <= y0.max() + 1e-12
            assert est.estimate == pytest.approx(mu1 - mu0)

    def test_uniform_weights_reduce_to_two_sample_variance(self, rng):
        site = random_site(rng, n=25, d=2)
        est = weighting_estimate(site, np.ones(site.n))
        z = site.treatment
        y1 = site.outcomes[z == 1]
        y0 = site.outcomes[z == 0]
        expected = np.var(y1, ddof=1) / site.n1 + np.var(y0, ddof=1) / site.n0
        assert est.std_error**2 == pytest.approx(expected, rel=1e-12)


class TestNaiveEstimate:
    def test_difference_in_means(self):
        site = build_site(np.zeros((4, 1)), [1, 1, 0, 0], [2.0, 4.0, 1.0, 1.0])
        assert naive_estimate(site).estimate == pytest.approx(2.0)

    def test_equal_arms_give_zero(self):
        site = build_site(np.zeros((4, 1)), [1, 1, 0, 0], [1.5, 2.5, 1.5, 2.5])
        assert naive_estimate(site).estimate == pytest.approx(0.0)

    def test_equals_weighting_with_all_ones(self, rng):
        site = random_site(rng, n=17, d=2)
        naive = naive_estimate(site)
        ones = weighting_estimate(site, np.ones(site.n))
        assert naive.estimate == ones.estimate  # exact, same code path
        assert naive.std_error == ones.std_error


class TestOutcomeModel:
    def test_constant_outcomes(self, rng):
        X = rng.normal(size=(30, 2))
        z = np.array([1, 0] * 15)
        y = np.where(z == 1, 5.0, 3.0)
        site = build_site(X, z, y)
        target = TargetSpec.from_sample(rng.normal(2.0, 1.0, size=(10, 2)))
        est = outcome_model_estimate(site, target, identity_map(2), n_boot=0)
        assert est.estimate == pytest.approx(2.0, abs=1e-10)

    def test_noiseless_linear_truth(self, rng):
        X = rng.normal(size=(40, 3))
        z = np.array([1, 0] * 20)
        b1 = np.array([1.0, -2.0, 0.5])
        b0 = np.array([0.2, 0.3, -0.1])
        y = np.where(z == 1, X @ b1 + 1.0, X @ b0)
        site = build_site(X, z, y)
        target = TargetSpec.from_sample(rng.normal(0.7, 1.0, size=(25, 3)))
        est = outcome_model_estimate(site, target, identity_map(3), n_boot=0)
        truth = float(np.mean(target.sample @ (b1 - b0) + 1.0))
        assert est.estimate == pytest.approx(truth, abs=1e-8)

    def test_self_target_equals_regression_adjusted_ate(self, rng):
        site = random_site(rng, n=30, d=2)
        target = TargetSpec.from_sample(site.covariates)
        est = outcome_model_estimate(site, target, identity_map(2), n_boot=0)
        # second computational path: fit each arm, predict on own covariates
        design = np.column_stack([np.ones(site.n), site.covariates])
        z = site.treatment
        f1 = fit_least_squares(design[z == 1], site.outcomes[z == 1])
        f0 = fit_least_squares(design[z == 0], site.outcomes[z == 0])
        expected = float(np.mean(design @ f1.coefficients - design @ f0.coefficients))
        assert est.estimate == pytest.approx(expected, abs=1e-10)

    def test_insufficient_arm(self, rng):
        X = rng.normal(size=(5, 3))
        site = build_site(X, [1, 1, 1, 0, 0], rng.normal(size=5))
        with pytest.raises(InsufficientArmError):
            outcome_model_estimate(site, TargetSpec.from_sample(X), identity_map(3), n_boot=0)

    def test_collinear_columns_recorded(self, rng):
        X = rng.normal(size=(30, 2))
        X = np.column_stack([X, X[:, 0]])  # duplicate column
        z = np.array([1, 0] * 15)
        site = build_site(X, z, rng.normal(size=30))
        est = outcome_model_estimate(
            site, TargetSpec.from_sample(X), identity_map(3), n_boot=0
        )
        assert any("collinear" in n for n in est.notes)

    def test_bootstrap_se_is_reproducible(self, rng):
        site = random_site(rng, n=26, d=2)
        target = TargetSpec.from_sample(rng.normal(size=(12, 2)))
        a = outcome_model_estimate(site, target, identity_map(2), n_boot=50, seed=9)
        b = outcome_model_estimate(site, target, identity_map(2), n_boot=50, seed=9)
        assert a.std_error == b.std_error > 0


class TestDensityRatio:
    def test_identical_samples_give_unit_ratio(self, rng):
        X = rng.normal(size=(200, 2))
        ratio = density_ratio_fit(X, X.copy(), identity_map(2))
        held_out = rng.normal(size=(50, 2))
        np.testing.assert_allclose(ratio(held_out), np.ones(50), rtol=0.05)

    def test_two_point_closed_form(self):
        # experimental: 25% ones; target: 50% ones -> ratio(1) = 2, ratio(0) = 2/3
        Xe = np.array([[1.0]] * 50 + [[0.0]] * 150)
        Xt = np.array([[1.0]] * 100 + [[0.0]] * 100)
        ratio = density_ratio_fit(Xe, Xt, identity_map(1))
        assert ratio(np.array([1.0])) == pytest.approx(2.0, rel=0.05)
        assert ratio(np.array([0.0])) == pytest.approx(2.0 / 3.0, rel=0.05)

    def test_disjoint_supports_raise(self):
        Xe = np.linspace(0, 1, 40)[:, None]
        Xt = np.linspace(5, 6, 40)[:, None]
        with pytest.raises(SeparableDataError):
            density_ratio_fit(Xe, Xt, identity_map(1))


class TestIpw:
    def test_unit_ratio_equals_naive(self, rng):
        # pi = n1/n exactly makes the 1/n-normalized IPW collapse to the
        # difference in means
        X = rng.normal(size=(4, 1))
        site = build_site(X, [1, 1, 0, 0], [4.0, 2.0, 1.0, 3.0])
        est = ipw_estimate(site, lambda X_: np.ones(len(np.atleast_2d(X_))))
        assert est.estimate == pytest.approx(naive_estimate(site).estimate, abs=1e-12)

    def test_zero_ratio_gives_zero(self, rng):
        site = random_site(rng, n=12, d=1)
        est = ipw_estimate(site, lambda X_: np.zeros(len(np.atleast_2d(X_))))
        assert est.estimate == 0.0

    def test_extreme_ratio_noted(self, rng):
        site = random_site(rng, n=12, d=1)
        big = np.full(site.n, 1e6)
        est = ipw_estimate(site, lambda X_: big)
        assert np.isfinite(est.estimate)
        assert any("clip bound" in n for n in est.notes)

    def test_hajek_variant_is_shift_invariant(self, rng):
        site = random_site(rng, n=20, d=2)
        shifted = build_site(site.covariates, site.treatment, site.outcomes + 7.0)
        r = lambda X_: np.exp(0.3 * np.atleast_2d(X_)[:, 0])
        a = ipw_estimate(site, r, hajek=True)
        b = ipw_estimate(shifted, r, hajek=True)
        assert a.estimate == pytest.approx(b.estimate, abs=1e-10)


class TestDoublyRobust:
    def _noiseless_site(self, rng, n=40, d=2):
        X = rng.normal(size=(n, d))
        z = np.array([1, 0] * (n // 2))
        b1 = np.array([0.8, -0.4])[:d]
        b0 = np.array([0.1, 0.2])[:d]
        y = np.where(z == 1, X @ b1 + 0.9, X @ b0)
        site = build_site(X, z, y)
        target = TargetSpec.from_sample(rng.normal(0.5, 1.0, size=(30, d)))
        truth = float(np.mean(target.sample @ (b1 - b0) + 0.9))
        return site, target, truth

    def test_correct_outcome_model_immune_to_bad_ratio(self, rng):
        site, target, truth = self._noiseless_site(rng)
        bad_ratio = lambda X_: 1.0 + np.abs(np.atleast_2d(X_)[:, 0])
        est = doubly_robust_estimate(site, target, identity_map(2), ratio=bad_ratio, n_boot=0)
        # residuals are exactly zero, so the augmentation vanishes
        assert est.estimate == pytest.approx(truth, abs=1e-8)

    def test_zero_outcome_model_reduces_to_ipw(self, rng):
        site = random_site(rng, n=20, d=2)
        r = np.abs(rng.normal(1.0, 0.3, site.n))
        ipw = ipw_estimate(site, lambda X_: r)
        zeros = np.zeros(site.n)
        dr = _dr_point(site, r, zeros, zeros, 0.0, 0.0)
        assert dr == pytest.approx(ipw.estimate, abs=1e-12)

    def test_both_correct_matches_outcome_model(self, rng):
        site, target, _ = self._noiseless_site(rng)
        ratio = density_ratio_fit(site.covariates, target.sample, identity_map(2))
        om = outcome_model_estimate(site, target, identity_map(2), n_boot=0)
        dr = doubly_robust_estimate(site, target, identity_map(2), ratio=ratio, n_boot=0)
        assert dr.estimate == pytest.approx(om.estimate, abs=1e-6)


class TestShiftEquivariance:
    @settings(max_examples=10, deadline=None)
    @given(st_.floats(-20, 20, allow_nan=False))
    def test_all_estimators_ignore_outcome_shifts(self, c):
        rng = np.random.default_rng(7)
        site = random_site(rng, n=30, d=2)
        shifted = build_site(site.covariates, site.treatment, site.outcomes + c)
        target = TargetSpec.from_sample(rng.normal(0.3, 1.0, size=(20, 2)))
        fmap = identity_map(2)
        gamma = np.abs(rng.normal(1.0, 0.2, site.n))
        z = site.treatment
        gamma[z == 1] *= site.n1 / gamma[z == 1].sum()
        gamma[z == 0] *= site.n0 / gamma[z == 0].sum()

        assert weighting_estimate(shifted, gamma).estimate == pytest.approx(
            weighting_estimate(site, gamma).estimate, abs=1e-9
        )
        assert naive_estimate(shifted).estimate == pytest.approx(
            naive_estimate(site).estimate, abs=1e-9
        )
        om0 = outcome_model_estimate(site, target, fmap, n_boot=0)
        om1 = outcome_model_estimate(shifted, target, fmap, n_boot=0)
        assert om1.estimate == pytest.approx(om0.estimate, abs=1e-8)
        ratio = density_ratio_fit(site.covariates, target.sample, fmap)
        dr0 = doubly_robust_estimate(site, target, fmap, ratio=ratio, n_boot=0)
        dr1 = doubly_robust_estimate(shifted, target, fmap, ratio=ratio, n_boot=0)
        assert dr1.estimate == pytest.approx(dr0.estimate, abs=1e-8)

    def test_weighted_means_shift_by_constant(self, rng):
        site = random_site(rng, n=16, d=1)
        shifted = build_site(site.covariates, site.treatment, site.outcomes + 3.0)
        z = site.treatment
        mu1 = float(np.sum(z * site.outcomes)) / site.n1
        mu1s = float(np.sum(z * shifted.outcomes)) / site.n1
        assert mu1s == pytest.approx(mu1 + 3.0)


class TestLogisticRegression:
    def test_balanced_coin_has_zero_slope(self, rng):
        X = np.column_stack([np.ones(400), rng.normal(size=400)])
        y = (rng.random(400) < 0.5).astype(float)
        fit = fit_logistic(X, y)
        assert fit.converged
        assert abs(fit.coefficients[1]) < 0.3

    def test_recovers_known_coefficients(self, rng):
        n = 4000
        x = rng.normal(size=n)
        eta = -0.3 + 0.8 * x
        y = (rng.random(n) < 1.0 / (1.0 + np.exp(-eta))).astype(float)
        fit = fit_logistic(np.column_stack([np.ones(n), x]), y)
        assert fit.converged
        np.testing.assert_allclose(fit.coefficients, [-0.3, 0.8], atol=0.15)
