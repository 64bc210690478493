"""Rolling betas, hypothesis-test selection and high/low-beta backtests.

Pipeline: daily adjusted closes -> ISO-week last-price returns (percent) ->
rolling-window regressions of each stock on the index with both estimators ->
one-sided tests of ``beta <= high`` and ``beta >= low`` -> equal-weight
portfolios of the rejected names held for the following week.
"""

from __future__ import annotations

import csv
import datetime as dt
import math
from decimal import ROUND_DOWN, Decimal
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from .core import (
    ClipPolicy,
    Dataset,
    build_design,
    cov_least_squares,
    cov_norm_weighted,
    fit_least_squares,
    fit_norm_weighted,
    raw_intercept,
)
from .errors import DuplicateRow, MissingIndex, NumericError, ParseError

__all__ = [
    "BacktestReport",
    "PricePanel",
    "ROLLING_FIELDS",
    "ReturnPanel",
    "RollingPanel",
    "STRATEGIES",
    "Z_CRIT",
    "cross_section_summary",
    "decision_counts",
    "display_sig",
    "ingest_prices",
    "make_synthetic_prices",
    "rms_step",
    "roll_fit",
    "roughness",
    "select_and_backtest",
    "turnover",
    "weekly_returns",
]

# One-sided 5% standard normal critical value.
Z_CRIT = 1.6448536269514722

ROLLING_FIELDS = (
    "beta_nw", "beta_ls", "se_nw", "se_ls",
    "alpha_nw", "alpha_ls", "se_alpha_nw", "se_alpha_ls",
    "t_high_nw", "t_high_ls", "t_low_nw", "t_low_ls",
)
STRATEGIES = ("LowNW", "LowLS", "HighNW", "HighLS", "Index")


@dataclass
class PricePanel:
    adj_close: pd.DataFrame  # date x ticker, NaN where absent
    index_ticker: str

    @property
    def dates(self) -> pd.DatetimeIndex:
        return self.adj_close.index

    @property
    def tickers(self) -> list[str]:
        return list(self.adj_close.columns)


@dataclass
class ReturnPanel:
    r: pd.DataFrame  # week_end x ticker, percent returns, NaN = missing
    index_ticker: str

    @property
    def week_ends(self) -> pd.DatetimeIndex:
        return self.r.index

    @property
    def stocks(self) -> list[str]:
        return [t for t in self.r.columns if t != self.index_ticker]


def ingest_prices(path, index_ticker: str = "SPY") -> PricePanel:
    """Read a long ``date,ticker,adj_close`` CSV into a wide panel."""
    records: dict[tuple[dt.date, str], float] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise ParseError("empty file", line=1)
        if [h.strip() for h in header] != ["date", "ticker", "adj_close"]:
            raise ParseError(f"expected header date,ticker,adj_close, got {header}", line=1)
        for line, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 3:
                raise ParseError(f"expected 3 fields, got {len(row)}", line=line)
            d_raw, ticker, p_raw = (c.strip() for c in row)
            try:
                day = dt.date.fromisoformat(d_raw)
            except ValueError:
                raise ParseError(f"bad ISO date {d_raw!r}", line=line) from None
            if not ticker:
                raise ParseError("empty ticker", line=line)
            try:
                price = float(p_raw)
            except ValueError:
                raise ParseError(f"bad price {p_raw!r}", line=line) from None
            if not (math.isfinite(price) and price > 0):
                raise ParseError(f"price must be positive and finite, got {p_raw}", line=line)
            key = (day, ticker)
            if key in records:
                raise DuplicateRow(f"duplicate row for {ticker} on {day}", line=line)
            records[key] = price
    if not records:
        raise ParseError("no data rows")
    s = pd.Series(records)
    wide = s.unstack(level=1).sort_index()
    wide.index = pd.DatetimeIndex(wide.index, name="date")
    wide = wide.reindex(sorted(wide.columns), axis=1)
    if index_ticker not in wide.columns:
        raise MissingIndex(f"index ticker {index_ticker} not in file")
    missing = wide.index[wide[index_ticker].isna()]
    if len(missing):
        raise MissingIndex(f"index ticker {index_ticker} missing on {missing[0].date()}")
    return PricePanel(adj_close=wide, index_ticker=index_ticker)


def weekly_returns(pp: PricePanel, allow_gaps: bool = False) -> ReturnPanel:
    """Percent returns between last available prices of consecutive ISO weeks.

    A return across a calendar week with no observations is marked missing
    unless ``allow_gaps``.  Missing prices are never filled.
    """
    px = pp.adj_close
    if px.empty:
        raise ValueError("empty price panel")
    iso = px.index.isocalendar()
    keys = [iso["year"].to_numpy(), iso["week"].to_numpy()]
    weekly = px.groupby(keys).last()
    week_end = pd.Series(px.index, index=px.index).groupby(keys).max()
    weekly.index = pd.DatetimeIndex(week_end.to_numpy(), name="week_end")
    monday = np.array([dt.date.fromisocalendar(int(y), int(w), 1) for y, w in week_end.index],
                      dtype="datetime64[D]")
    consecutive = np.diff(monday) == np.timedelta64(7, "D")
    prev = weekly.shift(1)
    r = 100.0 * (weekly - prev) / prev
    r = r.iloc[1:]
    if not allow_gaps:
        r[~consecutive] = np.nan
    return ReturnPanel(r=r, index_ticker=pp.index_ticker)


@dataclass
class RollingPanel:
    frame: pd.DataFrame  # window_end, pos, ticker, ROLLING_FIELDS
    window: int
    high: float
    low: float
    crit: float
    skipped: list = field(default_factory=list)

    def decisions(self, crit: float | None = None) -> pd.DataFrame:
        c = self.crit if crit is None else crit
        f = self.frame
        return pd.DataFrame({
            "window_end": f["window_end"],
            "pos": f["pos"],
            "ticker": f["ticker"],
            "high_nw": f["t_high_nw"] > c,
            "high_ls": f["t_high_ls"] > c,
            "low_nw": f["t_low_nw"] < -c,
            "low_ls": f["t_low_ls"] < -c,
        })

    def to_csv(self, path) -> None:
        out = self.frame.drop(columns="pos").copy()
        out["window_end"] = out["window_end"].dt.strftime("%Y-%m-%d")
        out.to_csv(path, index=False, float_format="%.17g", lineterminator="\n")


def _fit_window(x, y, high, low, clip):
    ds = Dataset(y=y, z=x)
    des = build_design(ds)
    nw = fit_norm_weighted(des, y)
    nw = nw.with_cov(*cov_norm_weighted(des, nw, clip))
    ls = fit_least_squares(des, y)
    ls = ls.with_cov(cov_least_squares(des, ls))
    a_nw, sa_nw = raw_intercept(des, nw)
    a_ls, sa_ls = raw_intercept(des, ls)
    b_nw, b_ls = nw.beta[1], ls.beta[1]
    s_nw, s_ls = nw.se[1], ls.se[1]
    with np.errstate(divide="ignore", invalid="ignore"):
        return (b_nw, b_ls, s_nw, s_ls, a_nw, a_ls, sa_nw, sa_ls,
                np.float64(b_nw - high) / s_nw, np.float64(b_ls - high) / s_ls,
                np.float64(b_nw - low) / s_nw, np.float64(b_ls - low) / s_ls)


def _roll_ticker(xr, yr, window, high, low, clip):
    rows, skipped = [], []
    for e in range(window - 1, len(xr)):
        x = xr[e - window + 1:e + 1]
        y = yr[e - window + 1:e + 1]
        if not (np.isfinite(x).all() and np.isfinite(y).all()):
            skipped.append((e, "incomplete window"))
            continue
        try:
            rows.append((e, *_fit_window(x, y, high, low, clip)))
        except NumericError as exc:
            skipped.append((e, type(exc).__name__))
    return rows, skipped


def roll_fit(rp: ReturnPanel, window: int = 100, high: float = 1.4, low: float = 0.8,
             crit: float = Z_CRIT, clip: ClipPolicy = ClipPolicy(),
             workers: int = 1) -> RollingPanel:
    """Fit every stock on the index over each trailing ``window`` of weeks."""
    if window < 30:
        raise ValueError("window must be at least 30")
    xr = rp.r[rp.index_ticker].to_numpy()
    stocks = rp.stocks
    cols = [rp.r[t].to_numpy() for t in stocks]
    args = ([xr] * len(stocks), cols, [window] * len(stocks), [high] * len(stocks),
            [low] * len(stocks), [clip] * len(stocks))
    if workers > 1 and len(stocks) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_roll_ticker, *args))
    else:
        results = list(map(_roll_ticker, *args))
    rows, skipped = [], []
    week_ends = rp.week_ends
    for ticker, (r_rows, r_skip) in zip(stocks, results):
        rows.extend((week_ends[e], e, ticker, *vals) for e, *vals in r_rows)
        skipped.extend((week_ends[e], ticker, why) for e, why in r_skip)
    frame = pd.DataFrame(rows, columns=["window_end", "pos", "ticker", *ROLLING_FIELDS])
    frame = frame.sort_values(["pos", "ticker"], kind="stable").reset_index(drop=True)
    return RollingPanel(frame=frame, window=window, high=high, low=low, crit=crit,
                        skipped=skipped)


def turnover(previous, current, universe: int) -> float:
    """Fraction of the universe that entered or left: ``|S_t ^ S_{t-1}| / universe``."""
    if universe <= 0:
        return 0.0
    return len(set(previous) ^ set(current)) / universe


def display_sig(x: float, digits: int = 2) -> str:
    """Show ``x`` with ``digits`` significant digits, truncated toward zero.

    Digits beyond the last shown one are dropped, not rounded, so 0.0779
    displays as 0.077.
    """
    if not math.isfinite(x):
        return str(x)
    if x == 0:
        return "0"
    dec = Decimal(repr(x))
    exp = dec.adjusted() - digits + 1
    q = dec.quantize(Decimal(1).scaleb(exp), rounding=ROUND_DOWN)
    return format(q, "f") if exp < 0 else format(q.normalize(), "f")


def rms_step(series) -> float:
    """Root mean square of 100 x successive differences."""
    d = 100.0 * np.diff(np.asarray(series, dtype=np.float64))
    return float(np.sqrt(np.mean(d**2)))


def roughness(rpanel: RollingPanel) -> dict:
    """Pooled RMS of 100 x step changes across tickers, per estimate series."""
    names = {"beta_nw": "rms100_d_beta_nw", "beta_ls": "rms100_d_beta_ls",
             "se_nw": "rms100_d_se_nw", "se_ls": "rms100_d_se_ls"}
    sq = {k: [] for k in names}
    for _, g in rpanel.frame.groupby("ticker", sort=True):
        g = g.sort_values("pos")
        step = np.diff(g["pos"].to_numpy()) == 1
        for k in names:
            d = 100.0 * np.diff(g[k].to_numpy())
            sq[k].append(d[step] ** 2)
    out = {}
    for k, label in names.items():
        v = np.concatenate(sq[k]) if sq[k] else np.array([])
        if v.size == 0:
            raise ValueError("roughness needs at least two consecutive window ends")
        out[label] = float(np.sqrt(v.mean()))
    return out


def decision_counts(nw, ls) -> dict:
    nw = np.asarray(nw, dtype=bool)
    ls = np.asarray(ls, dtype=bool)
    return {"reject_nw": int(nw.sum()), "reject_ls": int(ls.sum()), "agree": int((nw & ls).sum())}


def cross_section_summary(rpanel: RollingPanel, window_end=None, crit: float | None = None):
    """Cross-sectional mean and 10/50/90% quantiles at one date, plus test counts.

    Returns ``(stats, tests)`` data frames.
    """
    f = rpanel.frame
    if window_end is None:
        window_end = f["window_end"].max()
    snap = f[f["window_end"] == pd.Timestamp(window_end)]
    if len(snap) < 10:
        raise ValueError(f"cross-section needs at least 10 fitted tickers, got {len(snap)}")
    cols = ["beta_nw", "beta_ls", "se_nw", "se_ls", "alpha_nw", "alpha_ls",
            "se_alpha_nw", "se_alpha_ls"]
    vals = snap[cols].to_numpy()
    stats = pd.DataFrame(
        np.vstack([vals.mean(axis=0), np.quantile(vals, [0.1, 0.5, 0.9], axis=0)]),
        index=["Mean", "Q(0.1)", "Q(0.5)", "Q(0.9)"], columns=cols)
    c = rpanel.crit if crit is None else crit
    tests = pd.DataFrame([
        decision_counts(snap["t_high_nw"] > c, snap["t_high_ls"] > c),
        decision_counts(snap["t_low_nw"] < -c, snap["t_low_ls"] < -c),
    ], index=["high", "low"])
    return stats, tests


@dataclass
class BacktestReport:
    strategies: dict  # name -> stats dict
    roughness: dict
    metadata: dict
    weekly: pd.DataFrame  # per holding week: returns, counts, universe

    def to_dict(self) -> dict:
        return {"metadata": self.metadata, "strategies": self.strategies,
                "roughness": self.roughness}

    def to_text(self, digits: int = 2) -> str:
        """Plain-text strategy table at display precision."""
        cols = ("mean", "sd", "sharpe", "alpha", "beta", "share", "delta_share")
        lines = ["strategy " + " ".join(f"{c:>11}" for c in cols)]
        for name, st in self.strategies.items():
            vals = " ".join(f"{display_sig(st[c], digits):>11}" for c in cols)
            lines.append(f"{name:<8} {vals}")
        return "\n".join(lines) + "\n"


def _strategy_stats(ret: np.ndarray, idx: np.ndarray, share, dshare, use_ls: bool,
                    clip: ClipPolicy) -> dict:
    mean = float(ret.mean())
    sd = float(ret.std(ddof=1))
    des = build_design(Dataset(y=ret, z=idx))
    if use_ls:
        res = fit_least_squares(des, ret)
        res = res.with_cov(cov_least_squares(des, res))
    else:
        res = fit_norm_weighted(des, ret)
        res = res.with_cov(*cov_norm_weighted(des, res, clip))
    alpha, alpha_se = raw_intercept(des, res)
    return {
        "mean": mean,
        "sd": sd,
        "sharpe": mean / sd if sd > 0 else float("nan"),
        "alpha": alpha,
        "alpha_se": alpha_se,
        "beta": float(res.beta[1]),
        "share": float(share),
        "delta_share": float(dshare),
    }


def select_and_backtest(rpanel: RollingPanel, rp: ReturnPanel, crit: float | None = None,
                        ls_summary: bool = False, clip: ClipPolicy = ClipPolicy(),
                        include_roughness: bool = True) -> BacktestReport:
    """Hold each week's test-selected names, equally weighted, over the next week.

    An empty selection earns 0 (cash).  Share is the selected fraction of the
    tickers fitted that week; turnover is the symmetric difference with the
    previous week's selection over the same denominator.
    """
    c = rpanel.crit if crit is None else crit
    dec = rpanel.decisions(c)
    positions = np.sort(dec["pos"].unique())
    n_weeks = len(rp.week_ends)
    hold = [p for p in positions if p + 1 < n_weeks]
    if len(hold) < 2 or not (np.diff(hold) == 1).any():
        raise ValueError("backtest needs at least two consecutive window ends")
    rmat = rp.r
    keys = {"LowNW": "low_nw", "LowLS": "low_ls", "HighNW": "high_nw", "HighLS": "high_ls"}
    by_pos = {p: g for p, g in dec.groupby("pos")}
    rows = []
    prev_sel = {k: None for k in keys}
    prev_pos = None
    for p in hold:
        g = by_pos[p]
        universe = len(g)
        nxt = rmat.iloc[p + 1]
        row = {"week": rp.week_ends[p + 1], "formed": rp.week_ends[p], "universe": universe,
               "Index": float(nxt[rp.index_ticker])}
        for name, col in keys.items():
            sel = set(g.loc[g[col].to_numpy(), "ticker"])
            vals = nxt[sorted(sel)].to_numpy(dtype=float) if sel else np.array([])
            vals = vals[np.isfinite(vals)]
            row[name] = float(vals.mean()) if vals.size else 0.0
            row[f"{name}_count"] = len(sel)
            row[f"{name}_share"] = len(sel) / universe if universe else 0.0
            if prev_sel[name] is not None and prev_pos == p - 1:
                row[f"{name}_dshare"] = turnover(prev_sel[name], sel, universe)
            else:
                row[f"{name}_dshare"] = np.nan
            prev_sel[name] = sel
        prev_pos = p
        rows.append(row)
    weekly = pd.DataFrame(rows)
    idx = weekly["Index"].to_numpy()
    strategies = {}
    for name in STRATEGIES:
        if name == "Index":
            # The index is always fully held and never turns over.
            share, dshare = 1.0, 0.0
        else:
            share = weekly[f"{name}_share"].mean()
            dshare = weekly[f"{name}_dshare"].mean(skipna=True)
        strategies[name] = _strategy_stats(weekly[name].to_numpy(), idx, share, dshare,
                                           ls_summary, clip)
    metadata = {
        "window": rpanel.window,
        "high": rpanel.high,
        "low": rpanel.low,
        "crit": c,
        "summary_estimator": "least_squares" if ls_summary else "norm_weighted",
        "empty_selection": "cash",
        "share_denominator": "fitted_subset",
        "sd_ddof": 1,
        "holding_weeks": len(weekly),
        "first_week": weekly["week"].iloc[0].strftime("%Y-%m-%d"),
        "last_week": weekly["week"].iloc[-1].strftime("%Y-%m-%d"),
    }
    rough = roughness(rpanel) if include_roughness else {}
    return BacktestReport(strategies=strategies, roughness=rough, metadata=metadata,
                          weekly=weekly)


def make_synthetic_prices(seed: int = 20201, weeks: int = 160,
                          betas: dict | None = None, index_ticker: str = "SPY",
                          start: str = "2017-01-02") -> pd.DataFrame:
    """Deterministic daily price panel in long ``date,ticker,adj_close`` form.

    Index daily returns are scaled t(3) draws; each stock loads on the index
    with the given beta plus Gaussian idiosyncratic noise.
    """
    betas = {"HIB": 2.0, "MID": 1.0, "LOB": 0.3} if betas is None else betas
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))
    days = pd.bdate_range(start, periods=5 * weeks)
    m = len(days)
    idx_ret = 0.0004 + 0.007 * rng.standard_t(3, m) / np.sqrt(3.0)
    prices = {index_ticker: 300.0 * np.cumprod(1.0 + idx_ret)}
    for i, (tic, b) in enumerate(sorted(betas.items())):
        eps = 0.01 * rng.standard_normal(m)
        prices[tic] = (50.0 + 10 * i) * np.cumprod(1.0 + b * idx_ret + eps)
    frames = [pd.DataFrame({"date": days.strftime("%Y-%m-%d"), "ticker": t, "adj_close": p})
              for t, p in prices.items()]
    return pd.concat(frames, ignore_index=True)
