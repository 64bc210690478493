"""Monte Carlo lab for the studentized slope statistics.

Predictors are shifted and scaled Student-t draws, either normalized to a
target standard deviation (needs nu > 2) or to a target mean absolute
deviation (needs only nu > 1).  Each replication fits both estimators with an
intercept and records the slope pivots; the pivot samples are then scored
against N(0, 1) with the Cramer-von Mises statistic.

Randomness: replication ``r`` of a run with seed ``s`` draws from a Philox
stream keyed by ``(s, stream, r)``, so results do not depend on how the
replications are split across worker processes.
"""

from __future__ import annotations

import enum
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
import pandas as pd
from scipy import special

from .core import (
    ClipPolicy,
    Dataset,
    build_design,
    cov_least_squares,
    cov_norm_weighted,
    fit_least_squares,
    fit_norm_weighted,
    pivot,
)
from .errors import ModeMismatch, NumericError

__all__ = [
    "NOMINAL_SIZES",
    "ScaleMode",
    "SimConfig",
    "SimSummary",
    "abs_mean_t",
    "cvm_grid",
    "cvm_null_quantiles",
    "cvm_statistic",
    "draw_dataset",
    "normal_cdf",
    "qq_export",
    "replication_rng",
    "run_replications",
    "sample_t",
]

NOMINAL_SIZES = (0.10, 0.05, 0.01)

# Stream tags keep replication draws and null-distribution draws apart.
_STREAM_REPLICATION = 0
_STREAM_CVM_NULL = 1


class ScaleMode(str, enum.Enum):
    VARIANCE_SCALED = "variance"
    ABS_MEAN_SCALED = "abs_mean"


@dataclass(frozen=True)
class SimConfig:
    n: int = 100
    nu: float = 2.4
    sigma_x: float = 3.24
    psi: float = 0.21
    beta0: float = 0.0
    beta1: float = 1.0
    sigma: float = 2.0
    scale_mode: ScaleMode = ScaleMode.VARIANCE_SCALED
    reps: int = 50_000
    seed: int = 0
    clip_d: float = 10.0
    clip_exponent: float = 0.2

    def __post_init__(self) -> None:
        object.__setattr__(self, "scale_mode", ScaleMode(self.scale_mode))
        if self.scale_mode is ScaleMode.VARIANCE_SCALED and not self.nu > 2:
            raise ModeMismatch(f"variance scaling needs nu > 2, got {self.nu}")
        if self.scale_mode is ScaleMode.ABS_MEAN_SCALED and not self.nu > 1:
            raise ModeMismatch(f"mean-absolute scaling needs nu > 1, got {self.nu}")
        if self.n < 4:
            raise ValueError("n must be at least 4")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")

    @property
    def clip(self) -> ClipPolicy:
        return ClipPolicy(d=self.clip_d, exponent=self.clip_exponent)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["scale_mode"] = self.scale_mode.value
        return out


def replication_rng(seed: int, index: int, stream: int = _STREAM_REPLICATION) -> np.random.Generator:
    ss = np.random.SeedSequence(seed, spawn_key=(stream, index))
    return np.random.Generator(np.random.Philox(ss))


def sample_t(nu: float, count: int, rng: np.random.Generator) -> np.ndarray:
    if not nu > 0:
        raise ValueError("nu must be positive")
    return rng.standard_t(nu, size=count)


def abs_mean_t(nu: float) -> float:
    """``E|V|`` for ``V ~ t_nu``: ``2 sqrt(nu) Gamma((nu+1)/2) / (sqrt(pi) (nu-1) Gamma(nu/2))``."""
    if not nu > 1:
        raise ValueError("E|V| is finite only for nu > 1")
    log_ratio = special.gammaln((nu + 1) / 2) - special.gammaln(nu / 2)
    return float(2.0 * np.sqrt(nu) * np.exp(log_ratio) / (np.sqrt(np.pi) * (nu - 1)))


def draw_dataset(cfg: SimConfig, rng: np.random.Generator) -> Dataset:
    v = sample_t(cfg.nu, cfg.n, rng)
    if cfg.scale_mode is ScaleMode.VARIANCE_SCALED:
        z = cfg.psi + cfg.sigma_x * np.sqrt((cfg.nu - 2) / cfg.nu) * v
    else:
        z = cfg.psi + cfg.sigma_x * v / abs_mean_t(cfg.nu)
    y = cfg.beta0 + cfg.beta1 * (z - cfg.psi) + cfg.sigma * rng.standard_normal(cfg.n)
    return Dataset(y=y, z=z)


def _replicate(cfg: SimConfig, clip: ClipPolicy, r: int) -> tuple[float, float]:
    ds = draw_dataset(cfg, replication_rng(cfg.seed, r))
    try:
        des = build_design(ds)
        nw = fit_norm_weighted(des, ds.y)
        cov_nw, _ = cov_norm_weighted(des, nw, clip)
        ls = fit_least_squares(des, ds.y)
        cov_ls = cov_least_squares(des, ls)
        t_nw = pivot(nw.beta[1], cfg.beta1, np.sqrt(cov_nw[1, 1]))
        t_ls = pivot(ls.beta[1], cfg.beta1, np.sqrt(cov_ls[1, 1]))
    except NumericError:
        return np.nan, np.nan
    return t_nw, t_ls


def _run_chunk(cfg: SimConfig, start: int, stop: int) -> np.ndarray:
    clip = cfg.clip
    out = np.empty((stop - start, 2))
    for i, r in enumerate(range(start, stop)):
        out[i] = _replicate(cfg, clip, r)
    return out


def _chunks(total: int, workers: int) -> list[tuple[int, int]]:
    size = max(1, -(-total // (4 * workers)))
    return [(a, min(a + size, total)) for a in range(0, total, size)]


@dataclass
class SimSummary:
    config: SimConfig
    t_nw: np.ndarray
    t_ls: np.ndarray
    skipped: int
    cvm_nw: float
    cvm_ls: float
    reject_counts: dict = field(default_factory=dict)
    rep_index: np.ndarray | None = None  # replication ids of the kept pivots

    def reject_rate(self, size: float, which: str = "nw") -> float:
        t = self.t_nw if which == "nw" else self.t_ls
        crit = special.ndtri(1 - size / 2)
        return float(np.mean(np.abs(t) > crit))

    def coverage(self, level: float = 0.95, which: str = "nw") -> float:
        return 1.0 - self.reject_rate(1.0 - level, which)

    def to_dict(self) -> dict:
        return {
            "config": self.config.to_dict(),
            "reps": int(self.config.reps),
            "skipped": int(self.skipped),
            "cvm_nw": self.cvm_nw,
            "cvm_ls": self.cvm_ls,
            "reject_counts": {
                k: {f"{s:.2f}": int(c) for s, c in v.items()}
                for k, v in self.reject_counts.items()
            },
        }


def run_replications(cfg: SimConfig, workers: int = 1) -> SimSummary:
    """Run ``cfg.reps`` independent replications and summarize the slope pivots.

    Replications whose fit hits a numerical failure are counted in
    ``skipped`` and left out of the pivot samples.
    """
    if cfg.reps < 100:
        raise ValueError("reps must be at least 100")
    workers = max(1, int(workers))
    if workers == 1:
        draws = _run_chunk(cfg, 0, cfg.reps)
    else:
        spans = _chunks(cfg.reps, workers)
        with ProcessPoolExecutor(max_workers=workers) as pool:
            parts = pool.map(_run_chunk, [cfg] * len(spans), *zip(*spans))
            draws = np.concatenate(list(parts))
    ok = np.isfinite(draws).all(axis=1)
    t_nw, t_ls = draws[ok, 0], draws[ok, 1]
    counts = {}
    for name, t in (("nw", t_nw), ("ls", t_ls)):
        counts[name] = {s: int(np.sum(np.abs(t) > special.ndtri(1 - s / 2))) for s in NOMINAL_SIZES}
    return SimSummary(
        config=cfg,
        t_nw=t_nw,
        t_ls=t_ls,
        skipped=int((~ok).sum()),
        cvm_nw=cvm_statistic(t_nw),
        cvm_ls=cvm_statistic(t_ls),
        reject_counts=counts,
        rep_index=np.flatnonzero(ok),
    )


def normal_cdf(x) -> np.ndarray:
    """Standard normal CDF (Cephes ``ndtr``, erf/erfc based)."""
    return special.ndtr(x)


def cvm_statistic(sample) -> float:
    """Cramer-von Mises W^2 of ``sample`` against N(0, 1)."""
    x = np.sort(np.asarray(sample, dtype=np.float64))
    m = x.size
    if m == 0:
        raise ValueError("empty sample")
    if not np.isfinite(x).all():
        raise ValueError("sample contains non-finite values")
    i = np.arange(1, m + 1)
    dev = normal_cdf(x) - (2 * i - 1) / (2.0 * m)
    return float(1.0 / (12 * m) + np.dot(dev, dev))


def _null_chunk(m: int, seed: int, start: int, stop: int) -> np.ndarray:
    return np.array([
        cvm_statistic(replication_rng(seed, t, _STREAM_CVM_NULL).standard_normal(m))
        for t in range(start, stop)
    ])


def cvm_null_quantiles(m: int, trials: int = 10_000, probs=(0.5, 0.95, 0.99),
                       seed: int = 0, workers: int = 1) -> np.ndarray:
    """Monte Carlo quantiles of W^2 for i.i.d. N(0, 1) samples of size ``m``."""
    if trials < 1000:
        raise ValueError("trials must be at least 1000")
    workers = max(1, int(workers))
    if workers == 1:
        stats = _null_chunk(m, seed, 0, trials)
    else:
        spans = _chunks(trials, workers)
        with ProcessPoolExecutor(max_workers=workers) as pool:
            parts = pool.map(_null_chunk, [m] * len(spans), [seed] * len(spans), *zip(*spans))
            stats = np.concatenate(list(parts))
    return np.quantile(stats, probs)


def qq_export(sample, grid: int = 100) -> pd.DataFrame:
    """Normal QQ pairs at probabilities ``(i - 0.5) / grid``.

    Empirical quantiles use the midpoint (Hazen) rule, which puts the i-th
    order statistic of an m-sample exactly at probability (i - 0.5)/m.
    """
    x = np.asarray(sample, dtype=np.float64)
    if x.size < grid:
        raise ValueError("sample smaller than grid")
    probs = (np.arange(1, grid + 1) - 0.5) / grid
    return pd.DataFrame({
        "prob": probs,
        "theoretical": special.ndtri(probs),
        "empirical": np.quantile(x, probs, method="hazen"),
    })


def cvm_grid(nus, ns, sigmas=(2.0,), reps: int = 50_000, seed: int = 0,
             null_trials: int = 10_000, workers: int | None = None,
             **cfg_kwargs) -> pd.DataFrame:
    """CvM scores of both pivots over a (nu, n, sigma) grid with null quantiles."""
    workers = os.cpu_count() if workers is None else workers
    q = cvm_null_quantiles(reps, null_trials, (0.5, 0.95, 0.99), seed, workers)
    rows = []
    for nu in nus:
        for n in ns:
            for sigma in sigmas:
                cfg = SimConfig(n=int(n), nu=float(nu), sigma=float(sigma), reps=reps,
                                seed=seed, **cfg_kwargs)
                summ = run_replications(cfg, workers)
                rows.append({"nu": float(nu), "n": int(n), "sigma": float(sigma),
                             "cvm_nw": summ.cvm_nw, "cvm_ls": summ.cvm_ls,
                             "q50": q[0], "q95": q[1], "q99": q[2]})
    return pd.DataFrame(rows, columns=["nu", "n", "sigma", "cvm_nw", "cvm_ls", "q50", "q95", "q99"])
