import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp
from scipy import special, stats

from mfselect.core import (BetaFactor, CategoricalFactor, GaussianFactor, InverseGammaFactor,
                           MeanFieldState, MultivariateGaussianFactor, NumericError,
                           TruncatedGaussianFactor, UsageError, digamma, inverse_mills, kl_beta,
                           kl_gaussian, log_sum_exp, log_sum_exp_rows, normalize_log_probs,
                           truncated_normal_mean)

finite = st.floats(-700, 700, allow_nan=False)


class TestLogSumExp:
    def test_matches_mpmath(self):
        v = [-1000.0, -999.0, -1001.5]
        expected = float(mpmath.log(sum(mpmath.exp(mpmath.mpf(x)) for x in v)))
        assert log_sum_exp(v) == pytest.approx(expected, rel=1e-15)

    def test_all_neg_inf(self):
        assert log_sum_exp([-np.inf, -np.inf]) == -np.inf

    def test_empty_is_usage_error(self):
        with pytest.raises(UsageError):
            log_sum_exp([])

    @given(hnp.arrays(float, st.integers(1, 20), elements=finite))
    def test_agrees_with_scipy(self, v):
        assert log_sum_exp(v) == pytest.approx(float(special.logsumexp(v)), rel=1e-12, abs=1e-12)

    @given(hnp.arrays(float, st.integers(1, 20), elements=finite))
    def test_bounds(self, v):
        # max <= lse <= max + log(len)
        m = float(np.max(v))
        lse = log_sum_exp(v)
        assert m - 1e-12 <= lse <= m + math.log(v.size) + 1e-9

    def test_rows(self):
        x = np.array([[0.0, 0.0], [1e3, 1e3 + math.log(3)]])
        np.testing.assert_allclose(log_sum_exp_rows(x), [math.log(2), 1e3 + math.log(4)], rtol=1e-15)

    @given(hnp.arrays(float, (3, 4), elements=st.floats(-50, 50)))
    def test_normalized_rows_sum_to_one(self, logits):
        p = normalize_log_probs(logits)
        np.testing.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-12)


class TestTruncatedNormal:
    @pytest.mark.parametrize("loc", [-40.0, -36.0, -34.0, -5.0, 0.0, 2.5, 30.0])
    def test_positive_mean_against_mpmath(self, loc):
        mpmath.mp.dps = 50
        x = mpmath.mpf(loc)
        pdf = mpmath.exp(-x ** 2 / 2) / mpmath.sqrt(2 * mpmath.pi)
        cdf = mpmath.ncdf(x)
        expected = float(x + pdf / cdf)
        assert truncated_normal_mean(loc, "positive") == pytest.approx(expected, rel=1e-10)

    @given(st.floats(-60, 60))
    def test_reflection(self, loc):
        # mean of the negative side at l is minus the positive side at -l
        assert truncated_normal_mean(loc, "negative") == pytest.approx(
            -truncated_normal_mean(-loc, "positive"), rel=1e-14, abs=1e-14)

    @given(st.floats(-60, 60))
    def test_sign_and_finiteness(self, loc):
        pos = truncated_normal_mean(loc, "positive")
        neg = truncated_normal_mean(loc, "negative")
        assert np.isfinite(pos) and np.isfinite(neg)
        assert pos > 0 > neg

    def test_matches_scipy_truncnorm(self):
        locs = np.linspace(-8, 8, 17)
        lib = truncated_normal_mean(locs, np.ones(17, dtype=bool))
        ref = [stats.truncnorm(-l, np.inf, loc=l).mean() for l in locs]
        np.testing.assert_allclose(lib, ref, rtol=1e-9)

    def test_bad_side(self):
        with pytest.raises(UsageError):
            truncated_normal_mean(0.0, "up")

    def test_nonfinite(self):
        with pytest.raises(UsageError):
            truncated_normal_mean(np.nan)

    def test_inverse_mills_tail_continuity(self):
        # the asymptotic branch joins the direct formula at the switch point
        a = inverse_mills(np.array([-35.0 - 1e-9]))[0]
        b = inverse_mills(np.array([-35.0 + 1e-9]))[0]
        assert a == pytest.approx(b, rel=1e-9)


class TestDigamma:
    @given(st.floats(1e-3, 1e6))
    def test_matches_scipy(self, x):
        assert digamma(x) == pytest.approx(float(special.digamma(x)), rel=1e-12, abs=1e-12)

    def test_known_values(self):
        assert digamma(1.0) == pytest.approx(-0.57721566490153286, rel=1e-15)
        assert digamma(0.5) == pytest.approx(-0.57721566490153286 - 2 * math.log(2), rel=1e-14)

    def test_nonpositive(self):
        with pytest.raises(UsageError):
            digamma(0.0)


class TestFactors:
    def test_gaussian_entropy_and_natural_round_trip(self):
        f = GaussianFactor(1.5, 0.7)
        assert float(f.entropy()) == pytest.approx(stats.norm(1.5, math.sqrt(0.7)).entropy(), rel=1e-14)
        g = GaussianFactor.from_natural(*f.natural())
        assert float(g.mean) == pytest.approx(1.5, rel=1e-15)
        assert float(g.variance) == pytest.approx(0.7, rel=1e-15)

    def test_gaussian_rejects_nonpositive_variance(self):
        with pytest.raises(NumericError):
            GaussianFactor(0.0, 0.0)

    def test_factors_are_immutable(self):
        f = GaussianFactor([1.0, 2.0], [1.0, 1.0])
        with pytest.raises(ValueError):
            f.mean[0] = 3.0

    def test_mvn_entropy(self):
        C = np.array([[2.0, 0.5], [0.5, 1.0]])
        f = MultivariateGaussianFactor(np.zeros(2), C)
        assert f.entropy() == pytest.approx(stats.multivariate_normal(np.zeros(2), C).entropy(), rel=1e-14)

    def test_mvn_validation(self):
        with pytest.raises(UsageError):
            MultivariateGaussianFactor(np.zeros(2), np.array([[1.0, 2.0], [2.0, 1.0]]))
        with pytest.raises(UsageError):
            MultivariateGaussianFactor(np.zeros(2), np.eye(3))

    @pytest.mark.parametrize("a,b", [(0.5, 2.0), (3.0, 1.5), (10.0, 40.0)])
    def test_inverse_gamma_moments(self, a, b):
        f = InverseGammaFactor(a, b)
        ref = stats.invgamma(a, scale=b)
        assert float(f.entropy()) == pytest.approx(ref.entropy(), rel=1e-12)
        assert float(f.mean_inverse()) == pytest.approx(ref.expect(lambda v: 1 / v), rel=1e-9)
        assert float(f.mean_log()) == pytest.approx(ref.expect(np.log), rel=1e-9, abs=1e-12)
        if a > 1:
            assert float(f.mean()) == pytest.approx(ref.mean(), rel=1e-14)
        else:
            assert float(f.mean()) == np.inf
        if a > 2:
            assert float(f.variance()) == pytest.approx(ref.var(), rel=1e-12)
        else:
            assert float(f.variance()) == np.inf

    def test_categorical(self):
        f = CategoricalFactor([[0.2, 0.8], [1.0, 0.0]])
        np.testing.assert_allclose(f.entropy(), [stats.entropy([0.2, 0.8]), 0.0], atol=1e-15)
        with pytest.raises(NumericError):
            CategoricalFactor([0.5, 0.6])

    @pytest.mark.parametrize("a,b", [(0.7, 0.4), (2.0, 5.0), (30.0, 3.0)])
    def test_beta(self, a, b):
        f = BetaFactor(a, b)
        ref = stats.beta(a, b)
        assert float(f.entropy()) == pytest.approx(ref.entropy(), rel=1e-12)
        assert float(f.mean()) == pytest.approx(ref.mean(), rel=1e-14)
        assert float(f.variance()) == pytest.approx(ref.var(), rel=1e-12)
        assert float(f.mean_log()) == pytest.approx(ref.expect(np.log), rel=1e-8)
        assert float(f.mean_log1m()) == pytest.approx(ref.expect(lambda u: np.log1p(-u)), rel=1e-8)

    def test_truncated_gaussian_log_normalizer(self):
        f = TruncatedGaussianFactor([0.5, 0.5], [True, False])
        np.testing.assert_allclose(f.log_normalizer(), [stats.norm.logcdf(0.5), stats.norm.logcdf(-0.5)],
                                   rtol=1e-14)

    def test_state_replace(self):
        s = MeanFieldState((GaussianFactor(0, 1),), (CategoricalFactor([0.5, 0.5]),))
        t = s.replace_parameter(0, GaussianFactor(2, 1))
        assert float(t.parameter_factors[0].mean) == 2 and float(s.parameter_factors[0].mean) == 0
        u = s.replace_latent(0, CategoricalFactor([1.0, 0.0]))
        assert u.latent_factors[0].probabilities[0] == 1.0


class TestKL:
    def test_gaussian_against_formula(self):
        q = MultivariateGaussianFactor(np.array([1.0, 0.0]), np.array([[1.0, 0.3], [0.3, 2.0]]))
        p = MultivariateGaussianFactor(np.array([0.0, -1.0]), np.array([[2.0, 0.0], [0.0, 0.5]]))
        Pi = np.linalg.inv(p.covariance)
        diff = p.mean - q.mean
        expected = 0.5 * (np.trace(Pi @ q.covariance) + diff @ Pi @ diff - 2
                          + np.log(np.linalg.det(p.covariance) / np.linalg.det(q.covariance)))
        assert kl_gaussian(q, p) == pytest.approx(expected, rel=1e-13)

    @given(hnp.arrays(float, 3, elements=st.floats(-3, 3)), st.floats(0.1, 5))
    def test_gaussian_nonnegative_and_zero_on_self(self, m, s):
        q = MultivariateGaussianFactor(m, s * np.eye(3))
        p = MultivariateGaussianFactor(np.zeros(3), np.eye(3))
        assert kl_gaussian(q, p) >= -1e-12
        assert kl_gaussian(q, q) == pytest.approx(0.0, abs=1e-12)

    def test_beta_against_quadrature(self):
        a, b, a0, b0 = 3.0, 2.0, 1.0, 4.0
        q, p = stats.beta(a, b), stats.beta(a0, b0)
        expected = q.expect(lambda u: q.logpdf(u) - p.logpdf(u))
        assert float(kl_beta(a, b, a0, b0)) == pytest.approx(expected, rel=1e-9)

    @given(st.floats(0.1, 20), st.floats(0.1, 20))
    def test_beta_zero_on_self(self, a, b):
        assert float(kl_beta(a, b, a, b)) == pytest.approx(0.0, abs=1e-10)


class TestWorkedValues:
    def test_log_sum_exp_examples(self):
        assert log_sum_exp([0.0, 0.0]) == pytest.approx(math.log(2), rel=1e-15)
        assert log_sum_exp([-1000.0, -1000.0]) == pytest.approx(-1000 + math.log(2), rel=1e-15)
        # frozen from mpmath at 50 digits
        assert log_sum_exp([1.0, 2.0, 3.0]) == pytest.approx(3.4076059644443806, rel=1e-15)

    def test_half_normal_mean(self):
        assert truncated_normal_mean(0.0, "positive") == pytest.approx(math.sqrt(2 / math.pi), rel=1e-15)
        assert truncated_normal_mean(0.0, "negative") == pytest.approx(-math.sqrt(2 / math.pi), rel=1e-15)

    def test_truncated_mean_against_quadrature(self):
        from scipy import integrate
        num = integrate.quad(lambda z: z * stats.norm.pdf(z - 1.5), 0, np.inf, epsabs=1e-14)[0]
        den = integrate.quad(lambda z: stats.norm.pdf(z - 1.5), 0, np.inf, epsabs=1e-14)[0]
        assert truncated_normal_mean(1.5, "positive") == pytest.approx(num / den, abs=1e-8)

    def test_digamma_examples(self):
        assert digamma(2.0) == pytest.approx(1 - 0.5772156649015329, rel=1e-15)
        assert digamma(0.5) == pytest.approx(-1.9635100260214235, rel=1e-14)

    def test_kl_example(self):
        q = MultivariateGaussianFactor(np.zeros(2), np.eye(2))
        p = MultivariateGaussianFactor(np.zeros(2), 2 * np.eye(2))
        assert kl_gaussian(q, p) == pytest.approx(math.log(2) - 0.5, rel=1e-14)

    def test_kl_mean_field_of_gaussian(self):
        # q with the diagonal precision of p: KL = (1/2) log(det diag(P) / det P)
        P = np.array([[2.0, 0.8], [0.8, 1.0]])
        p = MultivariateGaussianFactor(np.zeros(2), np.linalg.inv(P))
        q = MultivariateGaussianFactor(np.zeros(2), np.diag(1 / np.diag(P)))
        expected = 0.5 * math.log(np.prod(np.diag(P)) / np.linalg.det(P))
        assert kl_gaussian(q, p) == pytest.approx(expected, rel=1e-13)

    def test_kl_dimension_mismatch(self):
        with pytest.raises(UsageError):
            kl_gaussian(MultivariateGaussianFactor(np.zeros(1), np.eye(1)),
                        MultivariateGaussianFactor(np.zeros(2), np.eye(2)))


class TestInvariants:
    @given(st.floats(-80, 8), st.floats(1e-6, 5))
    def test_truncated_mean_exceeds_location_and_increases(self, loc, step):
        m = truncated_normal_mean(loc, "positive")
        assert m > max(0.0, loc)
        assert truncated_normal_mean(loc + step, "positive") > m

    @given(st.floats(8, 1e6), st.floats(0, 5))
    def test_truncated_mean_large_location(self, loc, step):
        # phi(l)/Phi(l) drops below half an ulp of l past l ~ 8, so only the weak forms survive rounding
        m = truncated_normal_mean(loc, "positive")
        assert m >= loc
        assert truncated_normal_mean(loc + step, "positive") >= m

    @given(hnp.arrays(float, st.integers(1, 12), elements=st.floats(-300, 300)), st.floats(-300, 300),
           st.randoms(use_true_random=False))
    def test_log_sum_exp_shift_and_permutation(self, v, c, rnd):
        base = log_sum_exp(v)
        assert log_sum_exp(v + c) == pytest.approx(base + c, rel=4 * np.finfo(float).eps, abs=1e-12)
        perm = list(v)
        rnd.shuffle(perm)
        assert log_sum_exp(perm) == pytest.approx(base, rel=4 * np.finfo(float).eps, abs=1e-13)

    @given(st.integers(0, 10 ** 6), st.integers(1, 5))
    def test_kl_random_pd_pairs(self, seed, d):
        rng = np.random.default_rng(seed)
        G, H = rng.standard_normal((d, d + 1)), rng.standard_normal((d, d + 1))
        q = MultivariateGaussianFactor(rng.standard_normal(d), G @ G.T + 0.1 * np.eye(d))
        p = MultivariateGaussianFactor(rng.standard_normal(d), H @ H.T + 0.1 * np.eye(d))
        assert kl_gaussian(q, p) > 0
        assert kl_gaussian(q, q) == pytest.approx(0.0, abs=1e-10)

    @given(st.floats(1e-3, 1e3), st.floats(1e-3, 1e3))
    def test_entropies_finite(self, a, b):
        for f in (InverseGammaFactor(a, b), BetaFactor(a, b), GaussianFactor(a, b)):
            assert np.isfinite(f.entropy())
