"""Norm-weighted and least-squares predictive regression.

The norm-weighted estimator solves the instrumental-variable equations

    S_GX b = S_GY,   S_GX = (1/n) sum G_j X_j',   S_GY = (1/n) sum G_j y_j,

with instruments ``G_j = X_j / ||X_j||_2`` built from the centered design row
``X_j = (1, (z_j - zbar)')'``.  Equivalently it is weighted least squares with
weight ``1 / ||X_j||_2``.  Because every ``|G_{j,i}| <= 1`` the estimator and its
sandwich covariance only need first moments of the predictors; the clipped
meat matrix removes the handful of observations whose predictors are so extreme
that the residual-variance estimate would otherwise break down.

The least-squares fit with an Eicker-Huber-White covariance is provided as the
comparison baseline.  All covariances use 1/n throughout, no degrees-of-freedom
corrections.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace
from typing import NamedTuple

import numpy as np

from .errors import DegenerateColumn, NonFinite, SingularGram, ZeroDenominator, ZeroSE

__all__ = [
    "COND_LIMIT",
    "ClipPolicy",
    "CondVarianceP1",
    "Dataset",
    "Design",
    "EstimatorKind",
    "FitResult",
    "NO_CLIP",
    "UnpackedFit",
    "build_design",
    "cond_variance",
    "cond_variance_formulas_p1",
    "cov_least_squares",
    "cov_norm_weighted",
    "fit",
    "fit_least_squares",
    "fit_norm_weighted",
    "pivot",
    "raw_intercept",
    "scalar_sign_estimate",
    "unpack_weighted",
]

# Gram matrices with a 2-norm condition number above this are treated as singular.
COND_LIMIT = 1e12


class EstimatorKind(str, enum.Enum):
    NORM_WEIGHTED = "norm_weighted"
    LEAST_SQUARES = "least_squares"


@dataclass(frozen=True)
class Dataset:
    """Raw sample: outcome ``y`` (n,) and predictors ``z`` (n, p)."""

    y: np.ndarray
    z: np.ndarray

    def __post_init__(self) -> None:
        y = np.asarray(self.y, dtype=np.float64).reshape(-1)
        z = np.asarray(self.z, dtype=np.float64)
        if z.ndim == 1:
            z = z[:, None]
        if z.ndim != 2 or z.shape[0] != y.shape[0]:
            raise ValueError(f"shape mismatch: y {y.shape}, z {z.shape}")
        if not (np.isfinite(y).all() and np.isfinite(z).all()):
            raise NonFinite("dataset contains NaN or Inf")
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "z", z)

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def p(self) -> int:
        return self.z.shape[1]


@dataclass(frozen=True)
class Design:
    """Centered design with its row norms and instruments.

    ``x`` has a leading column of ones when ``intercept`` is true.  The
    no-intercept form exists for the scalar sign-estimator reduction.
    """

    psi_hat: np.ndarray
    x: np.ndarray
    row_norm: np.ndarray
    g: np.ndarray
    intercept: bool = True

    @classmethod
    def from_matrix(cls, x, psi_hat=None, intercept: bool = True) -> Design:
        """Wrap an explicit design matrix (rows ``X_j``) without recentering."""
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 1:
            x = x[:, None]
        if not np.isfinite(x).all():
            raise NonFinite("design contains NaN or Inf")
        k_pred = x.shape[1] - int(intercept)
        psi = np.zeros(k_pred) if psi_hat is None else np.asarray(psi_hat, dtype=np.float64)
        norm = np.sqrt(np.einsum("ij,ij->i", x, x))
        with np.errstate(invalid="ignore", divide="ignore"):
            g = np.where(norm[:, None] > 0, x / norm[:, None], 0.0)
        return cls(psi_hat=psi, x=x, row_norm=norm, g=g, intercept=intercept)

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def k(self) -> int:
        """Number of coefficients."""
        return self.x.shape[1]

    @property
    def predictors(self) -> np.ndarray:
        """Centered predictor columns (the design without the intercept)."""
        return self.x[:, 1:] if self.intercept else self.x


def build_design(ds: Dataset, intercept: bool = True) -> Design:
    """Center the predictors at their sample means and form the instruments."""
    z = ds.z
    if (np.ptp(z, axis=0) == 0).any():
        bad = np.flatnonzero(np.ptp(z, axis=0) == 0).tolist()
        raise DegenerateColumn(f"predictor column(s) {bad} are constant")
    psi = z.mean(axis=0)
    xc = z - psi
    x = np.column_stack([np.ones(ds.n), xc]) if intercept else xc
    return Design.from_matrix(x, psi_hat=psi, intercept=intercept)


@dataclass(frozen=True)
class ClipPolicy:
    """Indicator weight that drops observations with extreme predictors from the meat.

    Observation j is kept iff ``max_i |x_{j,i}| / scale_i < d * n**exponent``
    over the predictor coordinates.  ``scale`` defaults to the per-column mean
    absolute centered deviation of the design being clipped.
    """

    d: float = 10.0
    exponent: float = 0.2
    scale: np.ndarray | None = None

    def __post_init__(self) -> None:
        if not self.d > 0 or not self.exponent > 0:
            raise ValueError("clip d and exponent must be positive")

    def threshold(self, n: int) -> float:
        return self.d * n**self.exponent

    def weights(self, des: Design) -> np.ndarray:
        """Boolean keep-mask of length n."""
        xp = des.predictors
        if xp.shape[1] == 0 or np.isinf(self.d):
            return np.ones(des.n, dtype=bool)
        scale = np.abs(xp).mean(axis=0) if self.scale is None else np.asarray(self.scale, float)
        ratio = np.abs(xp) / scale
        return ratio.max(axis=1) < self.threshold(des.n)


NO_CLIP = ClipPolicy(d=float("inf"))


@dataclass(frozen=True)
class FitResult:
    beta: np.ndarray
    residuals: np.ndarray
    estimator_kind: EstimatorKind
    cov: np.ndarray | None = None
    se: np.ndarray | None = None
    clip_count: int = 0
    diagnostics: dict = field(default_factory=dict)

    def with_cov(self, cov: np.ndarray, clip_count: int = 0) -> FitResult:
        se = np.sqrt(np.clip(np.diag(cov), 0.0, None))
        return replace(self, cov=cov, se=se, clip_count=int(clip_count))

    def to_dict(self) -> dict:
        return {
            "beta": self.beta.tolist(),
            "se": None if self.se is None else self.se.tolist(),
            "cov": None if self.cov is None else self.cov.tolist(),
            "clip_count": int(self.clip_count),
            "estimator_kind": self.estimator_kind.value,
        }


def _check_cond(a: np.ndarray, what: str) -> None:
    cond = np.linalg.cond(a)
    if not np.isfinite(cond) or cond > COND_LIMIT:
        raise SingularGram(f"{what} is numerically singular", cond=float(cond))


def _solve(a: np.ndarray, b: np.ndarray, what: str) -> np.ndarray:
    _check_cond(a, what)
    return np.linalg.solve(a, b)


def _sandwich(bread: np.ndarray, meat: np.ndarray, n: int, what: str) -> np.ndarray:
    binv = _solve(bread, np.eye(bread.shape[0]), what)
    cov = binv @ meat @ binv.T / n
    return 0.5 * (cov + cov.T)


def fit_norm_weighted(des: Design, y) -> FitResult:
    """Solve ``S_GX b = S_GY``; covariance is attached separately."""
    y = np.asarray(y, dtype=np.float64)
    n = des.n
    s_gx = des.g.T @ des.x / n
    s_gy = des.g.T @ y / n
    beta = _solve(s_gx, s_gy, "S_GX")
    return FitResult(beta=beta, residuals=y - des.x @ beta,
                     estimator_kind=EstimatorKind.NORM_WEIGHTED)


def fit_least_squares(des: Design, y) -> FitResult:
    y = np.asarray(y, dtype=np.float64)
    n = des.n
    s_xx = des.x.T @ des.x / n
    s_xy = des.x.T @ y / n
    beta = _solve(s_xx, s_xy, "S_XX")
    return FitResult(beta=beta, residuals=y - des.x @ beta,
                     estimator_kind=EstimatorKind.LEAST_SQUARES)


def scalar_sign_estimate(x, y) -> float:
    """``sum sign(x_j) y_j / sum |x_j|`` with sign(0) = 0."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    den = np.abs(x).sum()
    if den == 0:
        raise ZeroDenominator("all predictor values are zero")
    return float(np.sign(x) @ y / den)


def cov_norm_weighted(des: Design, fit: FitResult, clip: ClipPolicy = ClipPolicy()):
    """Clipped sandwich ``(1/n) S_GX^-1 S_clip S_GX^-1``.

    Returns ``(cov, clip_count)`` where ``clip_count`` is the number of
    observations whose residual was excluded from the meat.
    """
    n = des.n
    keep = clip.weights(des)
    u2 = fit.residuals**2
    if not keep.all():
        u2 = np.where(keep, u2, 0.0)
    meat = (des.g * u2[:, None]).T @ des.g / n
    s_gx = des.g.T @ des.x / n
    return _sandwich(s_gx, meat, n, "S_GX"), int(n - keep.sum())


def cov_least_squares(des: Design, fit: FitResult) -> np.ndarray:
    """Eicker-Huber-White sandwich ``(1/n) S_XX^-1 S_{U^2 X,X} S_XX^-1``."""
    n = des.n
    u2 = fit.residuals**2
    meat = (des.x * u2[:, None]).T @ des.x / n
    s_xx = des.x.T @ des.x / n
    return _sandwich(s_xx, meat, n, "S_XX")


def fit(z, y, estimator: str | EstimatorKind = EstimatorKind.NORM_WEIGHTED,
        clip: ClipPolicy = ClipPolicy(), intercept: bool = True) -> FitResult:
    """One-call fit with covariance attached."""
    des = build_design(Dataset(y=y, z=z), intercept=intercept)
    kind = EstimatorKind(estimator)
    if kind is EstimatorKind.NORM_WEIGHTED:
        res = fit_norm_weighted(des, y)
        cov, clipped = cov_norm_weighted(des, res, clip)
        return res.with_cov(cov, clipped)
    res = fit_least_squares(des, y)
    return res.with_cov(cov_least_squares(des, res))


class UnpackedFit(NamedTuple):
    beta0: float
    slopes: np.ndarray
    weights: np.ndarray
    y_tilde: float
    z_tilde: np.ndarray


def unpack_weighted(des: Design, y) -> UnpackedFit:
    """Intercept/slope split of the norm-weighted fit via weighted centering.

    With ``w_j`` proportional to ``1/||X_j||``, the slopes are the weighted
    least-squares slopes about the weighted means ``(Z~, Y~)`` and the
    intercept is ``Y~ - (Z~ - Zbar)' slopes``.
    """
    if not des.intercept:
        raise ValueError("unpack_weighted needs a design with an intercept")
    y = np.asarray(y, dtype=np.float64)
    inv = 1.0 / des.row_norm
    w = inv / inv.sum()
    xc = des.predictors
    x_tilde = w @ xc  # Z~ - Zbar
    y_tilde = float(w @ y)
    dx = xc - x_tilde
    s_zz = (dx * w[:, None]).T @ dx
    s_zy = (dx * w[:, None]).T @ (y - y_tilde)
    slopes = _solve(s_zz, s_zy, "weighted scatter")
    beta0 = y_tilde - float(x_tilde @ slopes)
    return UnpackedFit(beta0, slopes, w, y_tilde, des.psi_hat + x_tilde)


def pivot(beta_hat: float, beta_null: float, se: float) -> float:
    """Studentized statistic ``(beta_hat - beta_null) / se``."""
    if not (se > 0 and np.isfinite(se)):
        raise ZeroSE(f"standard error must be positive, got {se!r}")
    return (beta_hat - beta_null) / se


def raw_intercept(des: Design, res: FitResult) -> tuple[float, float]:
    """Intercept at zero predictor value, ``beta0 - psi_hat' slopes``, and its SE.

    This is the usual finance "alpha" when y is regressed on an index return.
    """
    c = np.concatenate([[1.0], -des.psi_hat])
    value = float(c @ res.beta)
    se = float(np.sqrt(max(c @ res.cov @ c, 0.0))) if res.cov is not None else float("nan")
    return value, se


def cond_variance(des: Design, sigma2, kind: str | EstimatorKind) -> np.ndarray:
    """Exact conditional covariance of the estimator given the predictors.

    ``(1/n) S_GX^-1 S_{sigma^2 G,G} S_GX^-1`` for the norm-weighted fit and
    ``(1/n) S_XX^-1 S_{sigma^2 X,X} S_XX^-1`` for least squares, with known
    per-observation noise variances ``sigma2``.
    """
    sigma2 = np.asarray(sigma2, dtype=np.float64)
    n = des.n
    if EstimatorKind(kind) is EstimatorKind.NORM_WEIGHTED:
        meat = (des.g * sigma2[:, None]).T @ des.g / n
        return _sandwich(des.g.T @ des.x / n, meat, n, "S_GX")
    meat = (des.x * sigma2[:, None]).T @ des.x / n
    return _sandwich(des.x.T @ des.x / n, meat, n, "S_XX")


class CondVarianceP1(NamedTuple):
    nw_beta0: float
    nw_beta1: float
    ls_beta0: float
    ls_beta1: float


def cond_variance_formulas_p1(des: Design, sigma2) -> CondVarianceP1:
    """Scalar closed forms of the conditional variances for one predictor.

    Written out observation by observation rather than through the matrix
    sandwich, so the two can be checked against each other.
    """
    if not des.intercept or des.k != 2:
        raise ValueError("closed forms need one predictor plus intercept")
    s2 = np.asarray(sigma2, dtype=np.float64)
    n = des.n
    d = des.x[:, 1]  # Z_j - Zbar
    root = np.sqrt(1.0 + d**2)
    w = (1.0 / root) / (1.0 / root).sum()
    z_tilde_c = w @ d  # Z~ - Zbar
    dt = d - z_tilde_c  # Z_j - Z~
    denom = (dt**2 / root).sum()
    nw_slope = (dt**2 * s2 / root**2).sum() / denom**2
    w_prime = (dt / root) / denom
    lam = w - z_tilde_c * w_prime
    nw_icpt = (s2 * lam**2).sum()
    ls_slope = (d**2 * s2).sum() / (d**2).sum() ** 2
    ls_icpt = s2.sum() / n**2
    return CondVarianceP1(float(nw_icpt), float(nw_slope), float(ls_icpt), float(ls_slope))
