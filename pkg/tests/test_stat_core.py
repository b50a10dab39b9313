import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from scfa.datagen import builtin_challenge_spec, population_model
from scfa.exceptions import DegenerateCombinationError, NotCorrelationError, SCFAError
from scfa.stat_core import (
    CorrelationInput,
    SignificanceConfig,
    chi2_figure,
    chi_square_cdf,
    chi_square_inv,
    chi_square_sf,
    cholesky_basis,
    correlation_from_data,
    normal_cdf,
    normal_quantile,
    project_combination,
    residual_z,
    sidak_level,
    two_sided_z,
)

# Frozen from mpmath at 40 digits (gammainc + findroot, erfinv), independent of scfa.
CHI2_INV_95_DF1 = 3.841458820694126
CHI2_INV_95_DF14 = 23.684791304840580
SIDAK_05_17 = 0.0030127052790058517
ORPHAN_R_P18_N2000 = 0.06634817230854797


def random_correlation(rng, p, rank=None):
    rank = rank or p
    a = rng.standard_normal((p, rank))
    s = a @ a.T
    d = 1 / np.sqrt(np.diag(s))
    return s * np.outer(d, d)


class TestCorrelationInput:
    def test_valid(self):
        c = CorrelationInput(np.eye(4), 10)
        assert c.p == 4
        assert c.labels == ("1", "2", "3", "4")

    @pytest.mark.parametrize(
        "r, n, msg",
        [
            (np.eye(2), 10, "at least 3"),
            (np.eye(3) * 2, 10, "unit diagonal"),
            (np.eye(3), 4, "too small"),
            (np.array([[1, 0.5, 0], [0.4, 1, 0], [0, 0, 1]]), 10, "symmetric"),
        ],
    )
    def test_invariants(self, r, n, msg):
        with pytest.raises(SCFAError, match=msg):
            CorrelationInput(r, n)

    def test_not_psd(self):
        r = np.array([[1, 0.9, -0.9], [0.9, 1, 0.9], [-0.9, 0.9, 1]])
        with pytest.raises(NotCorrelationError):
            CorrelationInput(r, 100)


class TestCorrelationFromData:
    def test_identical_columns(self):
        x = np.random.default_rng(0).standard_normal((50, 3))
        x[:, 1] = x[:, 0]
        assert correlation_from_data(x).r[0, 1] == pytest.approx(1.0, abs=1e-12)

    def test_negated_column(self):
        x = np.random.default_rng(1).standard_normal((50, 3))
        x[:, 2] = -x[:, 0]
        assert correlation_from_data(x).r[0, 2] == pytest.approx(-1.0, abs=1e-12)

    def test_affine_invariance(self):
        rng = np.random.default_rng(2)
        x = rng.standard_normal((200, 5))
        y = x * rng.uniform(0.1, 10, 5) + rng.uniform(-5, 5, 5)
        np.testing.assert_allclose(correlation_from_data(x).r, correlation_from_data(y).r, atol=1e-12)

    def test_zero_variance_named(self):
        x = np.random.default_rng(3).standard_normal((20, 4))
        x[:, 2] = 7.0
        with pytest.raises(SCFAError, match="column 3 has zero variance"):
            correlation_from_data(x)

    def test_non_finite(self):
        x = np.random.default_rng(4).standard_normal((20, 4))
        x[3, 1] = np.nan
        with pytest.raises(SCFAError, match="non-finite"):
            correlation_from_data(x)

    def test_population_entry_10_11(self):
        # variables 10 and 11 load .5 and .6 on the same factor
        model = population_model(builtin_challenge_spec())
        assert model.r_pop[9, 10] == pytest.approx(0.30, abs=1e-12)


class TestCholeskyBasis:
    def test_identity(self):
        b = cholesky_basis(CorrelationInput(np.eye(4), 10))
        np.testing.assert_allclose(b.t, np.eye(4), atol=1e-15)

    def test_two_by_two_closed_form(self):
        r = np.array([[1, 0.48, 0], [0.48, 1, 0], [0, 0, 1]])
        b = cholesky_basis(CorrelationInput(r, 10))
        np.testing.assert_allclose(b.t[:2, 1], [0.48, math.sqrt(1 - 0.48**2)], atol=1e-15)

    def test_population_reconstruction(self):
        model = population_model(builtin_challenge_spec())
        b = cholesky_basis(CorrelationInput(model.r_pop, 2000))
        assert np.max(np.abs(b.t.T @ b.t - model.r_pop)) < 1e-10
        np.testing.assert_allclose(np.sum(b.t**2, axis=0), 1.0, atol=1e-12)

    def test_semidefinite_uses_pivoting(self):
        rng = np.random.default_rng(5)
        r = random_correlation(rng, 6, rank=3)
        b = cholesky_basis(CorrelationInput(r, 100))
        assert b.t.shape[0] == 3
        assert np.max(np.abs(b.t.T @ b.t - r)) < 1e-10

    def test_subset_keeps_variable_ids(self):
        model = population_model(builtin_challenge_spec())
        c = CorrelationInput(model.r_pop, 2000)
        b = cholesky_basis(c, [0, 4, 9])
        assert b.column_index == (0, 4, 9)
        assert b.columns([4]).T @ b.columns([9]) == pytest.approx(c.r[4, 9])

    @settings(max_examples=40, deadline=None)
    @given(st.integers(3, 12), st.integers(0, 2**31 - 1))
    def test_round_trip_property(self, p, seed):
        r = random_correlation(np.random.default_rng(seed), p)
        b = cholesky_basis(CorrelationInput(r, 1000))
        assert np.max(np.abs(b.t.T @ b.t - r)) < 1e-10


class TestProjectCombination:
    def test_single_variable_is_its_row(self):
        rng = np.random.default_rng(6)
        c = CorrelationInput(random_correlation(rng, 5), 100)
        b = cholesky_basis(c)
        np.testing.assert_allclose(project_combination(b, {2: 1.0}, [0, 1, 3, 4]),
                                   c.r[2, [0, 1, 3, 4]], atol=1e-14)

    def test_two_dimensional_geometry(self):
        # A = (.6, .8, 0), C = (.8, 0, .6); A - (6/8) C leaves (0, .8, -.45)
        lam = np.array([0.6, 0.8, 0.5, 0.7])
        r = np.outer(lam, lam)
        np.fill_diagonal(r, 1)
        b = cholesky_basis(CorrelationInput(r, 10001))
        corrs = project_combination(b, {0: 1.0, 1: -0.75}, [2, 3])
        assert np.max(np.abs(corrs)) < 1e-12

    def test_matches_raw_data(self):
        rng = np.random.default_rng(7)
        x = rng.standard_normal((300, 6)) @ rng.standard_normal((6, 6))
        c = correlation_from_data(x)
        b = cholesky_basis(c)
        z = (x - x.mean(0)) / x.std(0)
        for _ in range(5):
            w = rng.standard_normal(3)
            combo = z[:, :3] @ w
            direct = [np.corrcoef(combo, z[:, k])[0, 1] for k in (3, 4, 5)]
            got = project_combination(b, dict(zip(range(3), w)), [3, 4, 5])
            assert np.max(np.abs(got - direct)) < 1e-10

    def test_degenerate(self):
        r = np.array([[1, 1, 0.3], [1, 1, 0.3], [0.3, 0.3, 1]])
        b = cholesky_basis(CorrelationInput(r, 100))
        with pytest.raises(DegenerateCombinationError):
            project_combination(b, {0: 1.0, 1: -1.0}, [2])

    def test_overlap_rejected(self):
        b = cholesky_basis(CorrelationInput(np.eye(3), 10))
        with pytest.raises(SCFAError):
            project_combination(b, {0: 1.0}, [0, 1])


class TestChiSquare:
    def test_inverse_anchor(self):
        assert chi_square_inv(0.95, 1) == pytest.approx(CHI2_INV_95_DF1, abs=1e-10)
        assert chi_square_inv(0.95, 14) == pytest.approx(CHI2_INV_95_DF14, abs=1e-9)

    @pytest.mark.parametrize("p", [0.01, 0.5, 0.99])
    @pytest.mark.parametrize("k", [1, 14])
    def test_round_trip(self, p, k):
        assert chi_square_cdf(chi_square_inv(p, k), k) == pytest.approx(p, abs=1e-10)

    def test_round_trip_grid(self):
        for k in (1, 2, 3, 5, 13, 14, 30, 100):
            for p in (1e-6, 1e-3, 0.05, 0.3, 0.5, 0.7, 0.95, 0.999, 1 - 1e-7):
                assert abs(chi_square_cdf(chi_square_inv(p, k), k) - p) < 1e-8

    def test_against_scipy(self):
        stats = pytest.importorskip("scipy.stats")
        for k in (1, 4, 14, 60):
            for x in (0.01, 1.0, 10.0, 50.0, 200.0):
                assert chi_square_cdf(x, k) == pytest.approx(stats.chi2.cdf(x, k), abs=1e-13)
                assert chi_square_sf(x, k) == pytest.approx(stats.chi2.sf(x, k), rel=1e-10, abs=1e-300)

    def test_orphan_threshold_anchor(self):
        x = chi_square_inv(0.95 ** (1 / 17), 1)
        assert math.sqrt(x / 1999) == pytest.approx(ORPHAN_R_P18_N2000, abs=1e-12)
        assert round(math.sqrt(x / 1999), 4) == 0.0663

    @pytest.mark.parametrize("args", [(0.0, 1), (1.0, 1), (0.5, 0), (0.5, 1.5)])
    def test_domain(self, args):
        with pytest.raises(SCFAError):
            chi_square_inv(*args)


class TestNormalQuantile:
    def test_median(self):
        assert normal_quantile(0.5) == 0.0

    @pytest.mark.parametrize("p", [1e-300, 1e-12, 1e-5, 0.02, 0.025, 0.3, 0.97, 0.99, 1 - 1e-12])
    def test_inverse(self, p):
        assert abs(normal_cdf(normal_quantile(p)) - p) < 1e-10

    def test_report_header_values(self):
        assert normal_quantile(1 - (1 - 0.95 ** (1 / 16)) / 2) == pytest.approx(2.9478, abs=5e-4)
        assert normal_quantile(1 - (1 - 0.95 ** (1 / 45)) / 2) == pytest.approx(3.2537, abs=5e-4)

    def test_domain(self):
        with pytest.raises(SCFAError):
            normal_quantile(1.0)


class TestSidak:
    def test_single_test(self):
        assert sidak_level(0.05, 1) == pytest.approx(0.05, abs=1e-16)

    def test_seventeen(self):
        assert sidak_level(0.05, 17) == pytest.approx(SIDAK_05_17, abs=1e-15)

    def test_with_normal_quantile(self):
        assert two_sided_z(0.05, 120) == pytest.approx(3.5226, abs=5e-4)

    @given(st.floats(1e-6, 0.5), st.integers(1, 10**6))
    def test_bonferroni_relation(self, alpha, d):
        level = sidak_level(alpha, d)
        # Sidak is never stricter than Bonferroni and keeps the family-wise risk exact
        assert level * d >= alpha * (1 - 1e-9)
        assert -math.expm1(d * math.log1p(-level)) == pytest.approx(alpha, rel=1e-9)

    @given(st.floats(1e-6, 0.5), st.integers(1, 10**5))
    def test_monotone(self, alpha, d):
        assert sidak_level(alpha, d + 1) < sidak_level(alpha, d)


class TestChi2Figure:
    def test_zero(self):
        assert chi2_figure(np.zeros(5), 100) == (0.0, 5)

    def test_single(self):
        chi2, df = chi2_figure([0.1], 101)
        assert chi2 == pytest.approx(1.0, abs=1e-12) and df == 1

    def test_fourteen(self):
        chi2, df = chi2_figure(np.full(14, 0.05), 2000)
        assert chi2 == pytest.approx(69.965, abs=1e-9) and df == 14

    def test_empty(self):
        with pytest.raises(SCFAError):
            chi2_figure([], 100)


class TestResidualZ:
    def test_equal(self):
        assert residual_z(0.3, 0.3, 100) == 0.0

    def test_model_fixed_anchor(self):
        assert residual_z(0.173, 0.0, 175, "model_fixed") == pytest.approx(2.292, abs=0.01)

    def test_paired_anchor(self):
        assert residual_z(0.270, 0.520, 2000, "paired") == pytest.approx(9.47, abs=0.02)

    def test_infinite_transform(self):
        with pytest.raises(SCFAError):
            residual_z(1.0, 0.2, 100)

    @given(st.floats(-0.99, 0.99), st.floats(-0.99, 0.99), st.integers(4, 10**5),
           st.sampled_from(["model_fixed", "paired"]))
    def test_symmetry_and_sign_flip(self, a, b, n, mode):
        z = residual_z(a, b, n, mode)
        assert residual_z(b, a, n, mode) == pytest.approx(z, abs=1e-12)
        assert residual_z(-a, -b, n, mode) == pytest.approx(z, abs=1e-12)


def test_significance_config():
    assert SignificanceConfig().residual_se_mode == "model_fixed"
    with pytest.raises(SCFAError):
        SignificanceConfig(alpha=1.5)
    with pytest.raises(SCFAError):
        SignificanceConfig(residual_se_mode="other")
