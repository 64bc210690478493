"""Norm-weighted quantile (median) predictive regression.

The estimator minimizes ``sum_j ||X_j||^-1 rho_tau(y_j - X_j' b)``.  Dividing
each row by its norm turns this into an ordinary check-loss regression of
``y*_j = y_j / ||X_j||`` on the instruments ``X*_j = G_j``, so the solver below
is a plain quantile-regression solver applied to the preprocessed data.

Solver: a primal-dual interior-point method on the bounded dual LP

    max  y*' a   s.t.  X*' a = (1 - tau) X*' 1,   0 <= a <= 1,

followed by a vertex polish (solve the k rows with the smallest residuals
exactly) and a subgradient certificate.  If the certificate fails the LP is
re-solved with HiGHS dual simplex.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy import optimize, sparse

from .core import Design, _solve
from .errors import EmptyBand, SolverFail

__all__ = [
    "QuantileFit",
    "check_loss",
    "cov_median",
    "default_bandwidth",
    "fit_quantile",
    "objective",
    "preprocess",
    "quantile_inference",
    "subgradient_certificate",
]


@dataclass(frozen=True)
class QuantileFit:
    tau: float
    beta: np.ndarray
    objective: float
    residuals: np.ndarray
    cov: np.ndarray | None = None
    se: np.ndarray | None = None
    bandwidth: float | None = None
    in_band_count: int | None = None
    diagnostics: dict = field(default_factory=dict)

    def with_cov(self, cov: np.ndarray, bandwidth: float, in_band_count: int) -> QuantileFit:
        se = np.sqrt(np.clip(np.diag(cov), 0.0, None))
        return replace(self, cov=cov, se=se, bandwidth=float(bandwidth),
                       in_band_count=int(in_band_count))

    def to_dict(self) -> dict:
        return {
            "beta": self.beta.tolist(),
            "se": None if self.se is None else self.se.tolist(),
            "cov": None if self.cov is None else self.cov.tolist(),
            "estimator_kind": "norm_weighted_quantile",
            "tau": self.tau,
            "objective": self.objective,
            "bandwidth": self.bandwidth,
            "in_band_count": self.in_band_count,
        }


def check_loss(u, tau: float) -> np.ndarray:
    """``rho_tau(u) = u (tau - 1{u < 0})``."""
    u = np.asarray(u, dtype=np.float64)
    return u * (tau - (u < 0))


def preprocess(des: Design, y):
    """Rescale each observation by ``1/||X_j||``; returns ``(y_star, x_star)``."""
    y = np.asarray(y, dtype=np.float64)
    if (des.row_norm == 0).any():
        raise ValueError("zero-norm design row has no finite weight")
    return y / des.row_norm, des.g


def objective(des: Design, y, b, tau: float) -> float:
    y = np.asarray(y, dtype=np.float64)
    return float((check_loss(y - des.x @ b, tau) / des.row_norm).sum())


def subgradient_certificate(xs: np.ndarray, ys: np.ndarray, b: np.ndarray, tau: float,
                            zero_tol: float | None = None) -> float:
    """Sup-norm of the smallest subgradient of the check loss at ``b``.

    Observations with ``|r_j| <= zero_tol`` may take any multiplier in
    ``[tau - 1, tau]``; the best choice is found by bounded least squares.
    A value of (numerically) zero certifies ``b`` as a minimizer.
    """
    r = ys - xs @ b
    if zero_tol is None:
        zero_tol = 1e-10 * (1.0 + np.abs(ys).max())
    on = np.abs(r) <= zero_tol
    off = ~on
    s = xs[off].T @ (tau - (r[off] < 0))
    if not on.any():
        return float(np.abs(s).max())
    xz = xs[on]
    if np.allclose(s, 0.0, atol=1e-300):
        return 0.0
    sol = optimize.lsq_linear(xz.T, -s, bounds=(tau - 1.0, tau), method="bvls")
    return float(np.abs(xz.T @ sol.x + s).max())


def _interior_point(xs, ys, tau, tol=1e-11, max_iter=100):
    """Mehrotra predictor-corrector for the bounded dual LP; returns (beta, iterations)."""
    n, k = xs.shape
    A = xs.T
    c = -ys
    x = np.full(n, 1.0 - tau)
    s = 1.0 - x
    b = A @ x
    lam = np.linalg.lstsq(A.T, c, rcond=None)[0]
    r = c - A.T @ lam
    r = np.where(r == 0, 1e-3, r)
    z = np.where(r > 0, r, 0.0)
    w = z - r
    step_frac = 0.9995
    scale = 1.0 + np.abs(c).sum()

    def max_step(v, dv):
        neg = dv < 0
        if not neg.any():
            return np.inf
        return float(np.min(-v[neg] / dv[neg]))

    it = 0
    for it in range(1, max_iter + 1):
        gap = c @ x - lam @ b + w.sum()
        if not np.isfinite(gap):
            break
        if gap < tol * scale:
            break
        q = 1.0 / (z / x + w / s)
        rr = z - w
        AQ = A * q
        M = AQ @ A.T
        dlam = np.linalg.solve(M, AQ @ rr)
        dx = q * (A.T @ dlam - rr)
        ds = -dx
        dz = -z * (1.0 + dx / x)
        dw = -w * (1.0 + ds / s)
        fp = min(step_frac * min(max_step(x, dx), max_step(s, ds)), 1.0)
        fd = min(step_frac * min(max_step(z, dz), max_step(w, dw)), 1.0)
        if min(fp, fd) < 1.0:
            mu = z @ x + w @ s
            g = (z + fd * dz) @ (x + fp * dx) + (w + fd * dw) @ (s + fp * ds)
            mu = mu * (g / mu) ** 3 / (2 * n)
            v = -rr + mu * (1.0 / x - 1.0 / s) - dx * dz / x + ds * dw / s
            dlam_c = np.linalg.solve(M, -(AQ @ v))
            dx_c = q * (A.T @ dlam_c + v)
            ds_c = -dx_c
            dz = (mu - x * z - dx * dz - z * dx_c) / x
            dw = (mu - s * w - ds * dw - w * ds_c) / s
            dx, ds, dlam = dx_c, ds_c, dlam_c
            fp = min(step_frac * min(max_step(x, dx), max_step(s, ds)), 1.0)
            fd = min(step_frac * min(max_step(z, dz), max_step(w, dw)), 1.0)
        x = x + fp * dx
        s = s + fp * ds
        lam = lam + fd * dlam
        z = z + fd * dz
        w = w + fd * dw
    return -lam, it


def _vertex_polish(xs, ys, b):
    """Exact fit through the k rows with the smallest residuals at ``b``."""
    n, k = xs.shape
    order = np.argsort(np.abs(ys - xs @ b), kind="stable")
    basis: list[int] = []
    for j in order:
        trial = basis + [int(j)]
        if np.linalg.matrix_rank(xs[trial]) == len(trial):
            basis = trial
            if len(basis) == k:
                break
    if len(basis) < k:
        return None
    return np.linalg.solve(xs[basis], ys[basis])


def _highs(xs, ys, tau):
    n, k = xs.shape
    cost = np.concatenate([np.zeros(k), np.full(n, tau), np.full(n, 1.0 - tau)])
    eye = sparse.identity(n, format="csr")
    a_eq = sparse.hstack([sparse.csr_matrix(xs), eye, -eye], format="csc")
    bounds = [(None, None)] * k + [(0, None)] * (2 * n)
    res = optimize.linprog(cost, A_eq=a_eq, b_eq=ys, bounds=bounds, method="highs-ds")
    if res.status != 0:
        return None
    return res.x[:k]


def fit_quantile(des: Design, y, tau: float = 0.5, max_iter: int = 100) -> QuantileFit:
    """Certified minimizer of the norm-weighted check loss."""
    if not 0.0 < tau < 1.0:
        raise ValueError(f"tau must lie in (0, 1), got {tau}")
    y = np.asarray(y, dtype=np.float64)
    ys, xs = preprocess(des, y)
    n, k = xs.shape
    grad_tol = 1e-8 * max(1.0, np.abs(xs).max(axis=1).sum())

    def loss(b):
        return float(check_loss(ys - xs @ b, tau).sum())

    diag: dict = {}
    b_ip, iters = _interior_point(xs, ys, tau, max_iter=max_iter)
    diag["iterations"] = iters
    candidates = []
    if np.isfinite(b_ip).all():
        bv = _vertex_polish(xs, ys, b_ip)
        if bv is not None:
            candidates.append(("interior_point+vertex", bv))
        candidates.append(("interior_point", b_ip))
    best = None
    for method, b in candidates:
        cert = subgradient_certificate(xs, ys, b, tau)
        if cert <= grad_tol:
            best = (method, b, cert)
            break
    if best is None:
        b = _highs(xs, ys, tau)
        if b is not None:
            bv = _vertex_polish(xs, ys, b)
            for method, cand in (("highs+vertex", bv), ("highs", b)):
                if cand is None:
                    continue
                cert = subgradient_certificate(xs, ys, cand, tau)
                if cert <= grad_tol:
                    best = (method, cand, cert)
                    break
    if best is None:
        raise SolverFail("no certified minimizer found", {**diag, "grad_tol": grad_tol})
    method, b, cert = best
    diag.update(method=method, subgradient_norm=cert, grad_tol=grad_tol)
    return QuantileFit(tau=tau, beta=b, objective=loss(b), residuals=y - des.x @ b,
                       diagnostics=diag)


def default_bandwidth(residuals, n: int | None = None, p: int = 1) -> float:
    """``MAD/0.6745 * n^(-1/5)``, floored so ``2(p+2)`` residuals fall inside the band."""
    r = np.asarray(residuals, dtype=np.float64)
    n = r.size if n is None else n
    if n < 10:
        raise ValueError("bandwidth rule needs n >= 10")
    mad = np.median(np.abs(r - np.median(r)))
    h = mad / 0.6745 * n ** (-0.2)
    need = min(2 * (p + 2), r.size)
    floor = np.nextafter(np.sort(np.abs(r))[need - 1], np.inf)
    return float(max(h, floor))


def cov_median(des: Design, qf: QuantileFit, h: float | None = None,
               middle: str = "GG") -> tuple[np.ndarray, float, int]:
    """Rectangular-kernel sandwich for the quantile fit.

    ``cov = 4 tau (1 - tau) / n * D^-1 M D^-1`` with
    ``D = (1/(n h)) sum G_j X_j' 1{|U_j| < h}`` and ``M = (1/n) sum G_j G_j'``
    (``middle="GX"`` swaps in ``S_GX``).  At the median the leading factor is 1.

    Returns ``(cov, h, in_band_count)``.
    """
    n, k = des.x.shape
    u = qf.residuals
    if h is None:
        h = default_bandwidth(u, n, p=k - int(des.intercept))
    band = np.abs(u) < h
    count = int(band.sum())
    if count < k + 1:
        raise EmptyBand(f"only {count} residuals inside bandwidth {h:.4g}; need {k + 1}")
    g = des.g
    d_hat = (g[band].T @ des.x[band]) / (n * h)
    if middle == "GG":
        m_hat = g.T @ g / n
    elif middle == "GX":
        m_hat = g.T @ des.x / n
    else:
        raise ValueError(f"middle must be 'GG' or 'GX', got {middle!r}")
    dinv = _solve(d_hat, np.eye(k), "D_hat")
    cov = 4.0 * qf.tau * (1.0 - qf.tau) * dinv @ m_hat @ dinv.T / n
    return 0.5 * (cov + cov.T), float(h), count


def quantile_inference(des: Design, y, tau: float = 0.5, h: float | None = None,
                       middle: str = "GG") -> QuantileFit:
    """Fit and attach the sandwich covariance in one call."""
    qf = fit_quantile(des, y, tau)
    cov, h, count = cov_median(des, qf, h, middle)
    return qf.with_cov(cov, h, count)
