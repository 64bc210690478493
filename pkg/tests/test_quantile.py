import numpy as np
import pytest

from nwreg.core import Dataset, Design, build_design
from nwreg.errors import EmptyBand
from nwreg.quantile import (
    QuantileFit,
    _highs,
    check_loss,
    cov_median,
    default_bandwidth,
    fit_quantile,
    objective,
    preprocess,
    quantile_inference,
    subgradient_certificate,
)


@pytest.fixture
def heavy(rng):
    n = 301
    z = rng.standard_t(2.5, n)
    y = 1.0 + 0.7 * z + rng.standard_t(3, n)
    ds = Dataset(y=y, z=z)
    return build_design(ds), y


class TestCheckLoss:
    def test_values(self):
        np.testing.assert_allclose(check_loss([-2.0, 0.0, 3.0], 0.25), [1.5, 0.0, 0.75])

    def test_median_is_half_absolute(self, rng):
        u = rng.standard_normal(100)
        np.testing.assert_allclose(check_loss(u, 0.5), 0.5 * np.abs(u))


class TestPreprocess:
    def test_rescaled_rows(self, heavy):
        des, y = heavy
        ys, xs = preprocess(des, y)
        np.testing.assert_allclose(ys * des.row_norm, y)
        np.testing.assert_allclose(xs, des.g)

    def test_zero_row_rejected(self):
        des = Design.from_matrix(np.array([0.0, 1.0, -1.0]), intercept=False)
        with pytest.raises(ValueError):
            preprocess(des, np.ones(3))


class TestFitQuantile:
    def test_scalar_median_of_slopes(self, rng):
        x = rng.standard_normal(101)
        y = rng.standard_cauchy(101)
        des = Design.from_matrix(x, intercept=False)
        qf = fit_quantile(des, y, 0.5)
        assert qf.beta[0] == pytest.approx(np.median(y / x), abs=1e-12)

    def test_scalar_positive_predictor_gives_quantile_of_ratios(self, rng):
        x = rng.uniform(0.5, 2.0, 103)
        y = rng.standard_normal(103)
        des = Design.from_matrix(x, intercept=False)
        qf = fit_quantile(des, y, 0.3)
        ratios = np.sort(y / x)
        # tau * n is not an integer, so the minimizer is the ceil(tau n)-th order statistic.
        assert qf.beta[0] == pytest.approx(ratios[int(np.ceil(0.3 * 103)) - 1], abs=1e-12)

    def test_agrees_with_simplex(self, heavy):
        des, y = heavy
        qf = fit_quantile(des, y)
        ys, xs = preprocess(des, y)
        b = _highs(xs, ys, 0.5)
        assert qf.objective == pytest.approx(check_loss(ys - xs @ b, 0.5).sum(), rel=1e-10)
        assert qf.objective == pytest.approx(objective(des, y, qf.beta, 0.5), rel=1e-12)

    @pytest.mark.parametrize("tau", [0.1, 0.5, 0.75])
    def test_certificate_small(self, heavy, tau):
        des, y = heavy
        qf = fit_quantile(des, y, tau)
        ys, xs = preprocess(des, y)
        assert subgradient_certificate(xs, ys, qf.beta, tau) <= qf.diagnostics["grad_tol"]

    def test_perturbation_does_not_improve(self, heavy, rng):
        des, y = heavy
        qf = fit_quantile(des, y)
        for _ in range(200):
            b = qf.beta + 1e-3 * rng.standard_normal(2)
            assert objective(des, y, b, 0.5) >= qf.objective - 1e-12

    @pytest.mark.parametrize("tau", [0.0, 1.0, -0.2])
    def test_invalid_tau(self, heavy, tau):
        des, y = heavy
        with pytest.raises(ValueError):
            fit_quantile(des, y, tau)


class TestBandwidth:
    def test_rule_of_thumb(self, rng):
        r = rng.standard_normal(5000)
        h = default_bandwidth(r)
        mad = np.median(np.abs(r - np.median(r)))
        assert h == pytest.approx(mad / 0.6745 * 5000 ** (-0.2))

    def test_floor_keeps_enough_residuals(self):
        r = np.concatenate([np.zeros(6), np.full(6, 5.0), [0.1, 0.2, 0.3, 0.4, 0.5]])
        r = np.concatenate([r, -r])
        h = default_bandwidth(r, p=1)
        assert (np.abs(r) < h).sum() >= 6

    def test_small_n(self):
        with pytest.raises(ValueError):
            default_bandwidth(np.arange(5.0))


class TestCovMedian:
    def test_uniform_residuals_density_factor(self, rng):
        n = 40000
        des = build_design(Dataset(y=np.zeros(n), z=rng.standard_normal(n)))
        u = rng.uniform(-1, 1, n)
        qf = QuantileFit(tau=0.5, beta=np.zeros(2), objective=0.0, residuals=u)
        cov, h, count = cov_median(des, qf, h=1.0, middle="GX")
        # All |U| < 1, so D equals S_GX exactly; with middle S_GX the cov is S_GX^-1 / n.
        assert count == n
        s_gx = des.g.T @ des.x / n
        np.testing.assert_allclose(cov, np.linalg.inv(s_gx) / n, rtol=1e-10)
        cov_half, _, c2 = cov_median(des, qf, h=0.5, middle="GX")
        # Half the residuals fall inside a band of half-width 0.5: D ~ S_GX again.
        assert c2 / n == pytest.approx(0.5, abs=0.01)
        np.testing.assert_allclose(np.diag(cov_half), np.diag(cov), rtol=0.05)

    def test_empty_band(self, heavy):
        des, y = heavy
        qf = fit_quantile(des, y)
        with pytest.raises(EmptyBand):
            cov_median(des, qf, h=1e-300)

    def test_middle_choice(self, heavy):
        des, y = heavy
        a = quantile_inference(des, y, middle="GG")
        b = quantile_inference(des, y, middle="GX")
        assert a.bandwidth == b.bandwidth
        assert not np.allclose(a.cov, b.cov)
        with pytest.raises(ValueError):
            quantile_inference(des, y, middle="XX")

    def test_tau_scaling(self, heavy):
        des, y = heavy
        qf = fit_quantile(des, y, 0.5)
        qf25 = QuantileFit(tau=0.25, beta=qf.beta, objective=0.0, residuals=qf.residuals)
        c50, h, _ = cov_median(des, qf)
        c25, _, _ = cov_median(des, qf25, h=h)
        np.testing.assert_allclose(c25, 0.75 * c50)
