from fractions import Fraction

import numpy as np
import pytest
import statsmodels.api as sm
from hypothesis import given, settings
from hypothesis import strategies as st

from nwreg.core import (
    NO_CLIP,
    ClipPolicy,
    Dataset,
    Design,
    EstimatorKind,
    build_design,
    cond_variance,
    cond_variance_formulas_p1,
    cov_least_squares,
    cov_norm_weighted,
    fit,
    fit_least_squares,
    fit_norm_weighted,
    pivot,
    raw_intercept,
    scalar_sign_estimate,
    unpack_weighted,
)
from nwreg.errors import DegenerateColumn, NonFinite, SingularGram, ZeroDenominator, ZeroSE


def _sample(rng, n=200, p=1, nu=3.0):
    z = rng.standard_t(nu, size=(n, p)) + 0.3
    y = 0.5 + z @ np.linspace(1.0, -0.5, p) + rng.standard_normal(n)
    return Dataset(y=y, z=z)


class TestDataset:
    def test_vector_predictor_becomes_column(self):
        ds = Dataset(y=[1.0, 2.0, 3.0], z=[0.0, 1.0, 5.0])
        assert ds.z.shape == (3, 1)
        assert ds.n == 3 and ds.p == 1

    @pytest.mark.parametrize("bad", [np.nan, np.inf, -np.inf])
    def test_non_finite_rejected(self, bad):
        with pytest.raises(NonFinite):
            Dataset(y=[1.0, bad, 3.0], z=[0.0, 1.0, 2.0])
        with pytest.raises(NonFinite):
            Dataset(y=[1.0, 2.0, 3.0], z=[0.0, bad, 2.0])

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            Dataset(y=[1.0, 2.0], z=[0.0, 1.0, 2.0])


class TestBuildDesign:
    def test_centering_and_instruments(self, rng):
        des = build_design(_sample(rng, p=3))
        np.testing.assert_allclose(des.predictors.mean(axis=0), 0.0, atol=1e-12)
        np.testing.assert_array_equal(des.x[:, 0], 1.0)
        assert np.all(np.abs(des.g) <= 1.0)
        np.testing.assert_allclose(np.linalg.norm(des.g, axis=1), 1.0, rtol=1e-14)
        assert np.all(des.row_norm >= 1.0)

    def test_constant_column(self):
        with pytest.raises(DegenerateColumn):
            build_design(Dataset(y=[1.0, 2.0, 3.0], z=[4.0, 4.0, 4.0]))

    def test_no_intercept_keeps_raw_values_centered(self, rng):
        des = build_design(_sample(rng), intercept=False)
        assert des.k == 1 and not des.intercept


class TestNormWeighted:
    def test_matches_weighted_least_squares(self, rng):
        ds = _sample(rng, n=300, p=2)
        des = build_design(ds)
        res = fit_norm_weighted(des, ds.y)
        # Independent route: ordinary lstsq on rows scaled by ||X_j||^-1/2.
        s = 1.0 / np.sqrt(des.row_norm)
        ref = np.linalg.lstsq(des.x * s[:, None], ds.y * s, rcond=None)[0]
        np.testing.assert_allclose(res.beta, ref, rtol=1e-12, atol=1e-12)
        np.testing.assert_allclose(res.residuals, ds.y - des.x @ res.beta)

    def test_scalar_is_sign_estimator_exactly(self):
        x = [3, -1, 4, -1, 5, -9, 2, 6]
        y = [2, 7, -1, 8, 2, 8, -1, 8]
        exact = Fraction(sum((1 if a > 0 else -1) * b for a, b in zip(x, y)),
                         sum(abs(a) for a in x))
        des = Design.from_matrix(np.array(x, float), intercept=False)
        beta = fit_norm_weighted(des, np.array(y, float)).beta[0]
        assert abs(beta - float(exact)) <= 1e-15
        assert scalar_sign_estimate(x, y) == pytest.approx(float(exact), abs=1e-15)

    def test_sign_estimator_zero_denominator(self):
        with pytest.raises(ZeroDenominator):
            scalar_sign_estimate([0.0, 0.0], [1.0, 2.0])

    def test_exact_linear_data(self):
        z = np.array([0.0, 1.0, 2.0, 5.0, -3.0])
        res = fit(z, 1.0 + 2.0 * z)
        np.testing.assert_allclose(res.beta, [1.0 + 2.0 * z.mean(), 2.0], atol=1e-12)
        np.testing.assert_allclose(res.se, 0.0, atol=1e-12)

    @settings(max_examples=50, deadline=None)
    @given(scale=st.floats(0.1, 10.0), shift=st.floats(-5.0, 5.0))
    def test_affine_equivariance(self, scale, shift):
        ds = _sample(np.random.default_rng(3), n=80)
        des = build_design(ds)
        b = fit_norm_weighted(des, ds.y).beta
        b2 = fit_norm_weighted(des, scale * ds.y + shift).beta
        np.testing.assert_allclose(b2, [scale * b[0] + shift, scale * b[1]], rtol=1e-9, atol=1e-9)

    def test_collinear_predictors_singular(self, rng):
        z = rng.standard_normal(50)
        ds = Dataset(y=rng.standard_normal(50), z=np.column_stack([z, 2.0 * z]))
        with pytest.raises(SingularGram) as info:
            fit_norm_weighted(build_design(ds), ds.y)
        assert info.value.cond > 1e12

    def test_one_call_fit_kinds(self, rng):
        ds = _sample(rng)
        assert fit(ds.z, ds.y).estimator_kind is EstimatorKind.NORM_WEIGHTED
        ls = fit(ds.z, ds.y, estimator="least_squares")
        assert ls.estimator_kind is EstimatorKind.LEAST_SQUARES
        assert set(ls.to_dict()) == {"beta", "se", "cov", "clip_count", "estimator_kind"}


class TestClip:
    def test_threshold(self):
        assert ClipPolicy().threshold(100) == pytest.approx(10 * 100**0.2)
        assert ClipPolicy().threshold(100) == pytest.approx(25.1189, abs=1e-4)

    def test_inert_on_thin_tails(self, rng):
        ds = Dataset(y=rng.standard_normal(1000), z=rng.standard_normal(1000))
        des = build_design(ds)
        res = fit_norm_weighted(des, ds.y)
        cov_c, count = cov_norm_weighted(des, res)
        cov_u, _ = cov_norm_weighted(des, res, NO_CLIP)
        assert count == 0
        np.testing.assert_array_equal(cov_c, cov_u)

    def test_single_outlier_excluded(self, rng):
        n = 100
        z = rng.standard_normal(n)
        z[17] = 1e6 * np.abs(z - z.mean()).mean()
        ds = Dataset(y=z + rng.standard_normal(n), z=z)
        des = build_design(ds)
        res = fit_norm_weighted(des, ds.y)
        cov, count = cov_norm_weighted(des, res)
        assert count == 1
        keep = np.ones(n, bool)
        keep[17] = False
        g, u = des.g[keep], res.residuals[keep]
        meat = (g * u[:, None] ** 2).T @ g / n
        binv = np.linalg.inv(des.g.T @ des.x / n)
        np.testing.assert_allclose(cov, binv @ meat @ binv.T / n, rtol=1e-10)

    def test_intercept_never_clipped(self):
        des = Design.from_matrix(np.ones((20, 1)), intercept=True)
        assert ClipPolicy(d=1e-9).weights(des).all()

    def test_invalid_policy(self):
        with pytest.raises(ValueError):
            ClipPolicy(d=0.0)


class TestLeastSquares:
    def test_matches_statsmodels_hc0(self, rng):
        ds = _sample(rng, n=250, p=2)
        des = build_design(ds)
        res = fit_least_squares(des, ds.y)
        cov = cov_least_squares(des, res)
        ref = sm.OLS(ds.y, des.x).fit(cov_type="HC0")
        np.testing.assert_allclose(res.beta, ref.params, rtol=1e-12)
        np.testing.assert_allclose(cov, ref.cov_params(), rtol=1e-10)


class TestUnpack:
    @pytest.mark.parametrize("p", [1, 2, 5])
    def test_matches_direct_solve(self, rng, p):
        ds = _sample(rng, n=150, p=p)
        des = build_design(ds)
        up = unpack_weighted(des, ds.y)
        b = fit_norm_weighted(des, ds.y).beta
        np.testing.assert_allclose(up.beta0, b[0], atol=1e-10)
        np.testing.assert_allclose(up.slopes, b[1:], atol=1e-10)
        assert up.weights.sum() == pytest.approx(1.0)
        np.testing.assert_allclose(up.z_tilde, up.weights @ ds.z)

    def test_needs_intercept(self, rng):
        des = build_design(_sample(rng), intercept=False)
        with pytest.raises(ValueError):
            unpack_weighted(des, np.zeros(des.n))


class TestConditionalVariance:
    def test_closed_forms_match_matrix(self, rng):
        ds = _sample(rng, n=120)
        des = build_design(ds)
        s2 = rng.uniform(0.5, 3.0, des.n)
        cf = cond_variance_formulas_p1(des, s2)
        nw = cond_variance(des, s2, "norm_weighted")
        ls = cond_variance(des, s2, "least_squares")
        np.testing.assert_allclose([cf.nw_beta0, cf.nw_beta1], np.diag(nw), rtol=1e-10)
        np.testing.assert_allclose([cf.ls_beta0, cf.ls_beta1], np.diag(ls), rtol=1e-10)

    def test_homoskedastic_least_squares(self, rng):
        des = build_design(_sample(rng))
        v = cond_variance(des, np.full(des.n, 4.0), EstimatorKind.LEAST_SQUARES)
        np.testing.assert_allclose(v, 4.0 * np.linalg.inv(des.x.T @ des.x), rtol=1e-10)


class TestInference:
    def test_pivot(self):
        assert pivot(1.5, 1.0, 0.25) == pytest.approx(2.0)
        with pytest.raises(ZeroSE):
            pivot(1.0, 1.0, 0.0)
        with pytest.raises(ZeroSE):
            pivot(1.0, 1.0, np.nan)

    @pytest.mark.parametrize("kind", ["norm_weighted", "least_squares"])
    def test_raw_intercept_is_reparametrized_fit(self, rng, kind):
        ds = _sample(rng, n=90)
        des = build_design(ds)
        res = fit(ds.z, ds.y, estimator=kind)
        alpha, alpha_se = raw_intercept(des, res)
        # Same weights on the uncentered design (1, z): intercept is alpha directly.
        x_raw = np.column_stack([np.ones(des.n), ds.z])
        w = 1.0 / des.row_norm if kind == "norm_weighted" else np.ones(des.n)
        b = np.linalg.solve((x_raw * w[:, None]).T @ x_raw, (x_raw * w[:, None]).T @ ds.y)
        assert alpha == pytest.approx(b[0], abs=1e-10)
        assert alpha_se > 0
