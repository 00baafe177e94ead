"""Tests for zdmix.coefficients on exactly solvable Markov models."""

from fractions import Fraction

import numpy as np
import pytest

from zdmix import zd_spectral as zd
from zdmix.coefficients import (
    CellObservable,
    CorrelationProvider,
    ExactProvider,
    MixingExpansion,
    assemble_A,
    assemble_expansion,
    b_series,
    central_factor,
    displayed_A1,
    displayed_A2,
    displayed_A3,
    displayed_A4,
    fit_decay,
    lambda4,
    lattice_moments,
    ratio_factor,
    sigma2,
    sigma2_with_bound,
)
from zdmix.core import ConfigError, ConvergenceError
from zdmix.tensor import SymTensor, gaussian_density


class _GrowingProvider(CorrelationProvider):
    """κ correlations that grow with the lag."""

    def mean(self, obs):
        return 0.0

    def kappa_autocorrelation(self, m_max):
        lags = np.abs(np.arange(-m_max, m_max + 1))
        return (1.01**lags)[:, None, None] * np.ones((1, 2, 2))

    def obs_kappa_correlation(self, obs, m_max):
        raise NotImplementedError

    def obs_kappa_pairs(self, obs, m_max, side):
        raise NotImplementedError

    def obs_kappa_triples(self, obs, m_max, side):
        raise NotImplementedError

    def displacement_moments(self, n, p_max):
        raise NotImplementedError

    def obs_displacement_moments(self, obs, n, p_max, side):
        raise NotImplementedError


class _NoEigenProvider(ExactProvider):
    """Exact correlations, but no access to the leading eigenvalue."""

    def lambda_derivatives(self, k_max):
        return None


@pytest.fixture(scope="module")
def w5_provider(w5):
    return ExactProvider(w5)


@pytest.fixture(scope="module")
def two_state_provider(two_state):
    return ExactProvider(two_state)


@pytest.fixture(scope="module")
def generic_pair():
    f = CellObservable("state:0", {(0, 0): 1.0})
    g = CellObservable("state:1", {(0, 0): 1.0, (1, 0): 0.5})
    return f, g


@pytest.fixture(scope="module")
def product_pair():
    """Zero-mean bases and zero-sum weights: C_n starts at n^-3."""
    f = CellObservable("centered:state:0", {(0, 0): 1.0, (1, 0): -1.0})
    g = CellObservable("centered:state:1", {(0, 0): 1.0, (1, 0): -1.0})
    return f, g


@pytest.fixture(scope="module")
def generic_set(two_state_provider, generic_pair):
    return assemble_expansion(two_state_provider, *generic_pair)


@pytest.fixture(scope="module")
def product_set(two_state_provider, product_pair):
    return assemble_expansion(two_state_provider, *product_pair)


# ── Cell observables ─────────────────────────────────────────────────────


class TestCellObservable:
    def test_moments(self):
        f = CellObservable("one", {(0, 0): 1.0, (1, 0): -1.0, (0, 2): 2.0})
        assert f.total == 2.0
        np.testing.assert_allclose(f.first_moment.entries, [-1.0, 4.0])
        np.testing.assert_allclose(f.second_moment.entries, [[-1.0, 0.0], [0.0, 8.0]])

    def test_cross_weights(self):
        f = CellObservable("one", {(0, 0): 1.0, (1, 0): 1.0})
        g = CellObservable("one", {(1, 0): 2.0})
        assert f.cross_weights(g) == {(1, 0): 2.0, (0, 0): 2.0}

    def test_cancelling_weights_dropped(self):
        f = CellObservable("one", {(0, 0): 1.0, (1, 0): -1.0})
        g = CellObservable("one", {(0, 0): 1.0, (-1, 0): 1.0})
        assert (0, 0) not in f.cross_weights(g)

    def test_from_config_string_keys(self):
        f = CellObservable.from_config({"base": "cos_phi", "weights": {"0,0": 1, "1,0": -1}})
        assert f.weights == {(0, 0): 1.0, (1, 0): -1.0}
        assert f.base == "cos_phi"

    def test_from_config_list(self):
        f = CellObservable.from_config(
            {"weights": [{"cell": [0, 1], "weight": 0.5}, {"cell": [2, 0], "weight": 1}]}
        )
        assert f.base == "one"
        assert f.weights == {(0, 1): 0.5, (2, 0): 1.0}

    @pytest.mark.parametrize(
        "section",
        [{"base": "one"}, {"weights": {"a,b": 1}}, {"weights": {}}, {"weights": 3}],
    )
    def test_from_config_rejects(self, section):
        with pytest.raises(ConfigError):
            CellObservable.from_config(section)

    def test_lattice_moments(self):
        f = CellObservable("one", {(0, 0): 1.0, (1, 0): -1.0})
        g = CellObservable("one", {(0, 0): 2.0, (0, 1): 1.0})
        w = lattice_moments(f, g, 2)
        assert w[0].item() == pytest.approx(f.total * g.total)
        expected_w1 = g.first_moment.entries * f.total - f.first_moment.entries * g.total
        np.testing.assert_allclose(w[1].entries, expected_w1)
        assert w[2].is_symmetric()


# ── Decay fit and Σ² ─────────────────────────────────────────────────────


class TestFitDecay:
    def test_iid_is_sentinel(self, w5_provider):
        fit = fit_decay(w5_provider, 16)
        assert fit.theta == 0.0
        assert fit.tail_bound(3) == 0.0

    def test_two_state_rate(self, two_state_provider):
        fit = fit_decay(two_state_provider, 20)
        assert fit.theta == pytest.approx(0.5, abs=0.05)
        assert fit.r2 > 0.99

    def test_too_few_lags(self, w5_provider):
        with pytest.raises(ValueError, match="at least 16"):
            fit_decay(w5_provider, 8)

    def test_non_decaying_is_error(self):
        with pytest.raises(ConvergenceError, match="do not decay"):
            fit_decay(_GrowingProvider(), 16)

    def test_choose_lags_meets_tolerance(self, two_state_provider):
        fit = fit_decay(two_state_provider, 20)
        m = fit.choose_lags(1e-9)
        assert fit.weighted_tail_bound(m) < 1e-9
        assert m == 12 or fit.weighted_tail_bound(m - 1) >= 1e-9


class TestSigma2:
    def test_w5(self, w5_provider):
        np.testing.assert_allclose(sigma2(w5_provider).entries, 0.4 * np.eye(2), atol=1e-14)

    def test_two_state_matches_eigenvalue(self, two_state, two_state_provider):
        s2 = sigma2(two_state_provider, 48)
        assert s2.allclose(zd.sigma2_exact(two_state), atol=1e-12)

    def test_iid_line_is_step_variance(self, iid_line):
        s2 = sigma2(ExactProvider(iid_line))
        assert s2.entries[0, 0] == pytest.approx(2 / 3)

    def test_tail_bound_over_tolerance(self, two_state_provider):
        _, bound = sigma2_with_bound(two_state_provider, 2)
        assert bound > 1e-6
        with pytest.raises(ConvergenceError, match="tail bound"):
            sigma2(two_state_provider, 2, tol=1e-6)


# ── B-series and A_m ─────────────────────────────────────────────────────


class TestBSeries:
    def test_constants_have_no_first_order(self, two_state_provider):
        b = b_series(two_state_provider, "one", "one", 20)
        assert np.abs(b.b1_plus.entries).max() < 1e-14
        assert np.abs(b.b1_minus.entries).max() < 1e-14

    def test_iid_b0_vanishes(self, w5_provider):
        b = b_series(w5_provider, "one", "one")
        assert np.abs(b.b0.entries).max() < 1e-15

    def test_b0_is_variance_defect(self, two_state_provider):
        b = b_series(two_state_provider, "one", "one", 40)
        s2n = two_state_provider.displacement_moments(256, 2)[2].real
        assert (b.sigma2 * 256.0 - s2n).allclose(b.b0, atol=1e-10)

    def test_symmetric_outputs(self, two_state_provider):
        b = b_series(two_state_provider, "state:0", "state:1", 16)
        for t in (b.b2_plus, b.b2_minus, b.b02_plus, b.b3_plus, b.b3_minus, b.c3_plus):
            assert t.is_symmetric()

    def test_first_order_matches_ratio(self, two_state_provider):
        b = b_series(two_state_provider, "state:0", "state:1", 40)
        left = ratio_factor(two_state_provider, "state:0", "+")
        right = ratio_factor(two_state_provider, "state:1", "-")
        assert left[1].allclose(b.b1_plus * 1j, atol=1e-10)
        assert right[1].allclose(b.b1_minus * 1j, atol=1e-10)
        assert left[2].allclose(b.b2_plus * -1.0, atol=1e-10)
        assert right[3].allclose(b.c3_minus * -1j, atol=1e-9)


class TestAssembleA:
    @pytest.fixture(scope="class")
    def triangle(self, two_state, two_state_provider):
        u, v = "state:0", "state:1"
        b = b_series(two_state_provider, u, v, 40)
        series = assemble_A(two_state_provider, u, v, b=b)
        uu = np.array([1.0, 0.0])
        vv = np.array([0.0, 1.0])
        spectral = zd.limit_Am_series(two_state, uu, vv, 4)
        finite = zd.exact_Am_series(two_state, uu, vv, 4, 256)
        return b, series, spectral, finite

    @pytest.mark.parametrize("m", range(5))
    def test_b_series_route_matches_spectral(self, triangle, m):
        _, series, spectral, _ = triangle
        assert series[m].allclose(spectral[m], atol=1e-7)

    @pytest.mark.parametrize("m", range(5))
    def test_spectral_matches_finite_n(self, triangle, m):
        _, _, spectral, finite = triangle
        assert finite[m].allclose(spectral[m], atol=1e-7)

    def test_a0_is_product_of_means(self, triangle):
        _, series, _, _ = triangle
        assert series[0].item() == pytest.approx(0.25)

    def test_displayed_low_orders(self, triangle):
        b, series, _, _ = triangle
        assert displayed_A1(b).allclose(series[1], atol=1e-12)
        assert displayed_A2(b).allclose(series[2], atol=1e-12)

    def test_constants_give_central_factor(self, two_state_provider):
        b = b_series(two_state_provider, "one", "one", 40)
        central = central_factor(two_state_provider, b.b0)
        series = assemble_A(two_state_provider, "one", "one", b=b, central=central)
        assert np.abs(series[1].entries).max() < 1e-12
        assert np.abs(series[3].entries).max() < 1e-9
        assert np.abs(displayed_A3(b).entries).max() < 1e-12
        assert displayed_A4(b, central.series[4]).allclose(series[4], atol=1e-9)


class TestLambda4:
    def test_w5_constants(self, w5_provider):
        s2 = sigma2(w5_provider)
        est = lambda4(w5_provider, s2, SymTensor.zeros(2))
        assert est.lambda4.entry(1, 1, 1, 1) == pytest.approx(0.4, abs=1e-10)
        assert est.cumulant4.entry(1, 1, 1, 1) == pytest.approx(-0.08, abs=1e-10)
        assert est.cumulant4.entry(1, 1, 2, 2) == pytest.approx(-0.16, abs=1e-10)

    def test_matches_eigenvalue_derivative(self, two_state, two_state_provider):
        b = b_series(two_state_provider, "one", "one", 40)
        est = lambda4(two_state_provider, b.sigma2, b.b0)
        exact = zd.lambda_derivatives(two_state, 4)[4].real
        assert est.lambda4.allclose(exact, atol=1e-8)

    def test_cumulant_matches_ladder_rate(self, two_state_provider):
        b = b_series(two_state_provider, "one", "one", 40)
        est = lambda4(two_state_provider, b.sigma2, b.b0)
        central = central_factor(two_state_provider, b.b0)
        assert est.cumulant4.allclose(central.log_rates[4].real, atol=1e-8)

    def test_non_increasing_ladder(self, w5_provider):
        with pytest.raises(ValueError, match="increasing"):
            lambda4(w5_provider, sigma2(w5_provider), SymTensor.zeros(2), ladder=(64, 32))


# ── Expansion ────────────────────────────────────────────────────────────


class TestMixingExpansion:
    def test_coboundary_shift(self):
        exp = MixingExpansion({1: 2.0, 2: 1.0}, Fraction(3), 2)
        cob = exp.coboundary()
        assert cob.complete_through == 4
        assert cob.coefficient(1) == 0.0
        assert cob.coefficient(2) == pytest.approx(-2.0)
        assert cob.coefficient(3) == pytest.approx(-4.0)

    def test_double_coboundary_shift(self):
        exp = MixingExpansion({1: 2.0}, Fraction(3), 2)
        dcob = exp.double_coboundary()
        assert dcob.complete_through == 5
        assert dcob.coefficient(2) == 0.0
        assert dcob.coefficient(3) == pytest.approx(-4.0)

    def test_predict(self):
        exp = MixingExpansion({1: 2.0, 2: -1.0}, Fraction(2), 2)
        assert exp.predict(10) == pytest.approx(0.2 - 0.01)
        assert exp.predict(10, through=1) == pytest.approx(0.2)

    def test_drops_terms_past_completeness(self):
        exp = MixingExpansion({1: 2.0, 3: 5.0}, Fraction(2), 2)
        assert exp.coefficient(3) == 0.0

    def test_sum_takes_weaker_completeness(self):
        a = MixingExpansion({1: 1.0}, Fraction(3), 2)
        b = MixingExpansion({1: 2.0, 2: 1.0}, Fraction(2), 2)
        total = a + b
        assert total.complete_through == 2
        assert total.c(0) == 3.0


class TestAssembleExpansion:
    def test_leading_coefficient(self, generic_set):
        assert generic_set.c(0) == pytest.approx(generic_set.closed_forms["leading"], rel=1e-12)
        assert generic_set.expansion.complete_through == 3

    def test_second_order_closed_form(self, generic_set):
        assert generic_set.c(1) == pytest.approx(
            generic_set.closed_forms["second_order"], rel=1e-7
        )

    def test_moment_form_of_b2(self, generic_set):
        bf = generic_set.bfrak
        assert bf.residual < 1e-7
        assert bf.a2_tilde.allclose(bf.a2_tilde_moment, atol=1e-7)

    def test_residual_shrinks(self, two_state_provider, generic_pair, generic_set):
        scaled = []
        for n in (64, 128, 256):
            exact = two_state_provider.correlation(*generic_pair, n)
            scaled.append(abs(exact - generic_set.predict(n)) * n**3)
        assert scaled[0] > scaled[1] > scaled[2]

    def test_second_order_residual_shrinks(self, two_state_provider, generic_pair, generic_set):
        scaled = []
        for n in (64, 128, 256):
            exact = two_state_provider.correlation(*generic_pair, n)
            scaled.append(abs(exact - generic_set.expansion.predict(n, through=2)) * n**2)
        assert scaled[0] > scaled[1] > scaled[2]

    def test_coboundary_identities(self, generic_set):
        cob = generic_set.expansion.coboundary()
        assert cob.c(0) == 0.0
        assert cob.c(1) == pytest.approx(-generic_set.c(0), rel=1e-12)
        assert cob.c(1) == pytest.approx(
            generic_set.closed_forms["coboundary_second_order"], rel=1e-10
        )
        assert generic_set.expansion.double_coboundary().c(2) == pytest.approx(
            -2.0 * generic_set.c(0), rel=1e-12
        )

    def test_zero_integral_leading(self, two_state_provider):
        f = CellObservable("state:0", {(0, 0): 1.0, (1, 0): -1.0})
        g = CellObservable("state:1", {(0, 0): 1.0, (1, 0): -1.0})
        cs = assemble_expansion(two_state_provider, f, g, order=2)
        assert cs.c(0) == 0.0
        assert abs(cs.c(1)) > 1e-6
        assert cs.c(1) == pytest.approx(cs.closed_forms["zero_integral_leading"], rel=1e-7)

    def test_algebraic_zero_below_third_order(self, product_set):
        assert product_set.c(0) == 0.0
        assert abs(product_set.c(1)) < 1e-15
        assert np.abs(product_set.bfrak.a2_tilde.entries).max() < 1e-15

    def test_third_order_closed_forms(self, product_set):
        c2 = product_set.c(2)
        assert c2 != 0.0
        assert c2 == pytest.approx(product_set.closed_forms["third_order"], rel=1e-7)
        assert c2 == pytest.approx(product_set.closed_forms["product_third_order"], rel=1e-7)

    def test_third_order_residual_shrinks(self, two_state_provider, product_pair, product_set):
        scaled = []
        for n in (64, 128, 256):
            exact = two_state_provider.correlation(*product_pair, n)
            scaled.append(abs(exact - product_set.predict(n)) * n**3)
        assert scaled[0] > scaled[1] > scaled[2]

    def test_unknown_sixth_order_limits_completeness(self, two_state, generic_pair):
        cs = assemble_expansion(_NoEigenProvider(two_state), *generic_pair)
        assert cs.expansion.complete_through == 2

    def test_unknown_sixth_order_harmless_for_zero_integrals(self, two_state, product_pair):
        cs = assemble_expansion(_NoEigenProvider(two_state), *product_pair)
        assert cs.expansion.complete_through == 3

    def test_asymmetric_complete_to_second_order(self, asymmetric):
        f = CellObservable.indicator((0,))
        cs = assemble_expansion(ExactProvider(asymmetric), f, f)
        assert cs.expansion.complete_through == 2
        assert cs.expansion.coefficient(Fraction(1, 2)) == pytest.approx(cs.peak)
        assert "second_order" not in cs.closed_forms

    def test_dimension_mismatch(self, w5_provider):
        f = CellObservable.indicator((0,))
        with pytest.raises(ValueError, match="do not match"):
            assemble_expansion(w5_provider, f, f)

    def test_order_bound(self, w5_provider):
        f = CellObservable.indicator((0, 0))
        with pytest.raises(ValueError, match="order"):
            assemble_expansion(w5_provider, f, f, order=4)


class TestLocalExpansion:
    @pytest.fixture(scope="class")
    def unit_set(self, w5_provider):
        f = CellObservable.indicator((0, 0))
        return assemble_expansion(w5_provider, f, f)

    @pytest.mark.parametrize("ell", [(0, 0), (3, -2), (5, 1)])
    def test_beats_gaussian(self, w5, unit_set, ell):
        n = 128
        exact = zd.exact_cell_law(w5, 1.0, 1.0, n).at(ell)
        gaussian = gaussian_density(unit_set.gaussian, np.array(ell) / np.sqrt(n)) / n
        corrected = unit_set.llt_predict(n, ell)
        assert abs(corrected - exact) < 0.1 * abs(gaussian - exact)

    def test_first_order_is_gaussian(self, w5_provider, unit_set):
        f = CellObservable.indicator((0, 0))
        first = assemble_expansion(w5_provider, f, f, order=1)
        n, ell = 64, (2, 1)
        expected = gaussian_density(unit_set.gaussian, np.array(ell) / np.sqrt(n)) / n
        assert first.llt_predict(n, ell) == pytest.approx(expected, rel=1e-10)


class TestCoefficientReport:
    def test_rows_and_files(self, generic_set, tmp_path):
        rows = generic_set.report_rows()
        stats = {r["statistic"] for r in rows}
        assert {"sigma2[1,1]", "sigma2[1,2]", "lambda4[1,1,1,1]", "c[n^-1]"} <= stats
        assert "sigma2[2,1]" not in stats
        path = generic_set.save(tmp_path)
        assert path.read_text().splitlines()[0] == "statistic,n,value,stderr,batches,seed"
        meta = (tmp_path / "meta.txt").read_text()
        assert "provider: exact:two-state" in meta
        assert "complete_through: 3" in meta

    def test_a_tensors_reported_real(self, generic_set):
        rows = {r["statistic"]: r["value"] for r in generic_set.report_rows()}
        a1 = generic_set.a_series[1].entries[0]
        assert rows["A1[1]"] == pytest.approx(a1.imag)
