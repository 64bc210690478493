"""Command line front end: ``nwreg {fit,simulate,cvm,roll,backtest,replay}``.

Every run writes its artifacts plus ``manifest.json`` into ``--out``.  The
manifest holds the fully resolved configuration (everything except the output
directory), and ``nwreg replay MANIFEST --out DIR`` re-runs it.

Exit codes: 0 success, 2 bad input, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
from importlib import resources
from pathlib import Path

import numpy as np
import pandas as pd

from . import __version__
from . import finlab, simlab
from ._io import write_csv, write_json
from .core import (
    ClipPolicy,
    Dataset,
    build_design,
    cov_least_squares,
    cov_norm_weighted,
    fit_least_squares,
    fit_norm_weighted,
)
from .errors import InputError, NwregError, ParseError
from .quantile import cov_median, fit_quantile

FULL_SCALE_REPS = 500_000
MANIFEST = "manifest.json"
# Keys that never enter the manifest.
_NOT_CONFIG = {"out", "command", "func", "manifest"}


def bundled_fixture() -> Path:
    """Path of the packaged synthetic 3-stock + SPY price file."""
    return Path(str(resources.files("nwreg") / "data" / "synthetic_prices.csv"))


def read_numeric_csv(path, y_col: str = "y") -> tuple[np.ndarray, np.ndarray, list[str]]:
    """Parse a headed numeric CSV into ``(y, Z, predictor_names)``."""
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ParseError("empty file", line=1)
    header = [h.strip() for h in rows[0]]
    if all(_is_number(h) for h in header):
        raise ParseError("missing header row", line=1)
    if y_col not in header:
        raise ParseError(f"no column named {y_col!r}", line=1)
    if len(header) < 2:
        raise ParseError("need a response and at least one predictor column", line=1)
    if len(set(header)) != len(header):
        raise ParseError("duplicate column names", line=1)
    data = []
    for line, row in enumerate(rows[1:], start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(header):
            raise ParseError(f"expected {len(header)} fields, got {len(row)}", line=line)
        try:
            data.append([float(c) for c in row])
        except ValueError:
            raise ParseError(f"non-numeric value in {row}", line=line) from None
    if not data:
        raise ParseError("no data rows")
    arr = np.array(data)
    iy = header.index(y_col)
    names = [h for i, h in enumerate(header) if i != iy]
    return arr[:, iy], np.delete(arr, iy, axis=1), names


def _is_number(s: str) -> bool:
    try:
        float(s)
    except ValueError:
        return False
    return True


def _clip(args) -> ClipPolicy:
    return ClipPolicy(d=args.d, exponent=args.exponent)


def cmd_fit(args, out: Path) -> None:
    y, z, names = read_numeric_csv(args.data, args.y_col)
    des = build_design(Dataset(y=y, z=z), intercept=not args.no_intercept)
    nw = fit_norm_weighted(des, y)
    nw = nw.with_cov(*cov_norm_weighted(des, nw, _clip(args)))
    ls = fit_least_squares(des, y)
    ls = ls.with_cov(cov_least_squares(des, ls))
    report = {
        "n": des.n,
        "predictors": names,
        "intercept": des.intercept,
        "psi_hat": des.psi_hat,
        "norm_weighted": nw.to_dict(),
        "least_squares": ls.to_dict(),
    }
    if args.tau is not None:
        qf = fit_quantile(des, y, args.tau)
        cov, h, count = cov_median(des, qf, args.bandwidth, args.middle)
        report["quantile"] = {**qf.with_cov(cov, h, count).to_dict(), "middle": args.middle}
    write_json(report, out / "fit.json")


def _sim_config(args) -> simlab.SimConfig:
    return simlab.SimConfig(
        n=args.n, nu=args.nu, sigma_x=args.sigma_x, psi=args.psi, beta0=args.beta0,
        beta1=args.beta1, sigma=args.sigma, scale_mode=args.scale_mode,
        reps=FULL_SCALE_REPS if args.full_scale else args.reps, seed=args.seed,
        clip_d=args.d, clip_exponent=args.exponent)


def cmd_simulate(args, out: Path) -> None:
    cfg = _sim_config(args)
    summ = simlab.run_replications(cfg, args.threads)
    write_csv(pd.DataFrame({"rep": summ.rep_index, "t_nw": summ.t_nw, "t_ls": summ.t_ls}),
              out / "pivots.csv")
    qn = simlab.qq_export(summ.t_nw, args.qq_grid)
    ql = simlab.qq_export(summ.t_ls, args.qq_grid)
    qq = pd.DataFrame({"prob": qn["prob"], "theoretical": qn["theoretical"],
                       "empirical_nw": qn["empirical"], "empirical_ls": ql["empirical"]})
    write_csv(qq, out / "qq.csv")
    report = summ.to_dict()
    report["reject_rate"] = {w: {f"{s:.2f}": summ.reject_rate(s, w) for s in simlab.NOMINAL_SIZES}
                             for w in ("nw", "ls")}
    report["coverage95"] = {w: summ.coverage(0.95, w) for w in ("nw", "ls")}
    write_json(report, out / "simulate.json")


def cmd_cvm(args, out: Path) -> None:
    grid = simlab.cvm_grid(args.nu, args.n, args.sigma, reps=args.reps, seed=args.seed,
                           null_trials=args.null_trials, workers=args.threads,
                           scale_mode=args.scale_mode, clip_d=args.d,
                           clip_exponent=args.exponent)
    write_csv(grid, out / "cvm_grid.csv")


def _rolling(args) -> tuple[finlab.ReturnPanel, finlab.RollingPanel]:
    pp = finlab.ingest_prices(args.prices, args.index)
    rp = finlab.weekly_returns(pp, allow_gaps=args.allow_gaps)
    rpanel = finlab.roll_fit(rp, args.window, args.high, args.low, args.crit, _clip(args),
                             workers=args.threads)
    return rp, rpanel


def _write_rolling(rpanel: finlab.RollingPanel, out: Path) -> None:
    rpanel.to_csv(out / "rolling.csv")
    skipped = pd.DataFrame(rpanel.skipped, columns=["window_end", "ticker", "reason"])
    skipped["window_end"] = pd.to_datetime(skipped["window_end"]).dt.strftime("%Y-%m-%d")
    write_csv(skipped, out / "skipped.csv")


def _write_summary(rpanel: finlab.RollingPanel, out: Path) -> None:
    n_last = (rpanel.frame["window_end"] == rpanel.frame["window_end"].max()).sum()
    if n_last < 10:
        print(f"note: cross-sectional summary skipped ({n_last} tickers fitted, need 10)",
              file=sys.stderr)
        return
    stats, tests = finlab.cross_section_summary(rpanel)
    write_csv(stats.rename_axis("statistic"), out / "summary.csv", index=True)
    write_csv(tests.rename_axis("test"), out / "tests.csv", index=True)


def cmd_roll(args, out: Path) -> None:
    _, rpanel = _rolling(args)
    _write_rolling(rpanel, out)
    _write_summary(rpanel, out)


def cmd_backtest(args, out: Path) -> None:
    rp, rpanel = _rolling(args)
    _write_rolling(rpanel, out)
    _write_summary(rpanel, out)
    rep = finlab.select_and_backtest(rpanel, rp, ls_summary=args.ls_summary, clip=_clip(args))
    write_json(rep.to_dict(), out / "backtest.json")
    (out / "backtest.txt").write_text(rep.to_text(), encoding="utf-8")
    weekly = rep.weekly.copy()
    for col in ("week", "formed"):
        weekly[col] = weekly[col].dt.strftime("%Y-%m-%d")
    write_csv(weekly, out / "backtest_weekly.csv")


# ---------------------------------------------------------------- parser


def _positive_int(s: str) -> int:
    v = int(s)
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be a positive integer, got {s}")
    return v


def _seed(s: str) -> int:
    v = int(s)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must be in [0, 2^64)")
    return v


def _d(s: str) -> float:
    v = float(s)
    if not v > 0:
        raise argparse.ArgumentTypeError("d must be positive (use inf to disable clipping)")
    return v


def _add_common(p: argparse.ArgumentParser, seed: bool = False) -> None:
    p.add_argument("--out", required=True, type=Path, help="output directory (created if absent)")
    p.add_argument("--threads", type=_positive_int, default=os.cpu_count() or 1,
                   help="worker processes for independent fits or replications "
                        "(defaults to the core count); outputs do not depend on it")
    if seed:
        p.add_argument("--seed", type=_seed, default=0,
                       help="single source of randomness; no entropy is read from the environment")


def _add_clip(p: argparse.ArgumentParser) -> None:
    p.add_argument("--d", type=_d, default=10.0,
                   help="clipping multiplier: residuals of observations with "
                        "max_i |x_i|/c_i >= d*n^exponent are dropped from the covariance "
                        "meat (c_i = mean absolute centered deviation); 'inf' disables")
    p.add_argument("--exponent", type=float, default=0.2,
                   help="clipping growth exponent (0.2 = 1/5)")


def _add_sim(p: argparse.ArgumentParser) -> None:
    p.add_argument("--scale-mode", choices=[m.value for m in simlab.ScaleMode],
                   default="variance",
                   help="predictor scaling: 'variance' fixes sd(z)=sigma-x (needs nu>2); "
                        "'abs_mean' fixes E|z-psi|=sigma-x (needs nu>1)")
    p.add_argument("--sigma-x", type=float, default=3.24, help="predictor scale")
    p.add_argument("--psi", type=float, default=0.21, help="predictor location")
    p.add_argument("--beta0", type=float, default=0.0, help="true intercept")
    p.add_argument("--beta1", type=float, default=1.0, help="true slope")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="nwreg", description=__doc__.split("\n\n")[0],
        formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    parser.add_argument("--version", action="version", version=f"nwreg {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    fmt = argparse.ArgumentDefaultsHelpFormatter

    p = sub.add_parser("fit", help="fit both estimators to a CSV of y and predictors",
                       formatter_class=fmt)
    p.add_argument("--data", required=True, type=Path,
                   help="headed numeric CSV; the response column plus predictor columns")
    p.add_argument("--y-col", default="y", help="name of the response column")
    p.add_argument("--no-intercept", action="store_true",
                   help="fit without intercept and without centering")
    _add_clip(p)
    p.add_argument("--tau", type=float, default=None,
                   help="also fit the norm-weighted quantile regression at this level")
    p.add_argument("--bandwidth", type=float, default=None,
                   help="band half-width for the density factor (default: MAD/0.6745*n^-1/5, "
                        "floored so enough residuals fall inside)")
    p.add_argument("--middle", choices=["GG", "GX"], default="GG",
                   help="middle matrix of the quantile sandwich: GG is the asymptotically "
                        "correct choice, GX swaps in S_GX")
    _add_common(p)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("simulate", help="Monte Carlo pivots for both estimators",
                       formatter_class=fmt)
    p.add_argument("--n", type=_positive_int, default=100, help="sample size")
    p.add_argument("--nu", type=float, default=2.4, help="Student-t degrees of freedom of z")
    p.add_argument("--sigma", type=float, default=2.0, help="noise standard deviation")
    _add_sim(p)
    p.add_argument("--reps", type=_positive_int, default=50_000,
                   help="replications (scaled down from 500k for desk runtime)")
    p.add_argument("--full-scale", action="store_true",
                   help=f"use {FULL_SCALE_REPS} replications, overriding --reps")
    p.add_argument("--qq-grid", type=_positive_int, default=100,
                   help="number of probabilities in qq.csv")
    _add_clip(p)
    _add_common(p, seed=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("cvm", help="Cramer-von Mises grid with Monte Carlo null quantiles",
                       formatter_class=fmt)
    p.add_argument("--nu", type=float, nargs="+", default=[2.4, 4.4, 8.0])
    p.add_argument("--n", type=_positive_int, nargs="+", default=[100, 250])
    p.add_argument("--sigma", type=float, nargs="+", default=[2.0])
    _add_sim(p)
    p.add_argument("--reps", type=_positive_int, default=50_000, help="replications per cell")
    p.add_argument("--null-trials", type=_positive_int, default=10_000,
                   help="null samples of size reps used for the quantile columns")
    _add_clip(p)
    _add_common(p, seed=True)
    p.set_defaults(func=cmd_cvm)

    for name, func, text in (
        ("roll", cmd_roll, "rolling-window betas and one-sided beta tests"),
        ("backtest", cmd_backtest, "rolling tests plus high/low-beta portfolio backtest"),
    ):
        p = sub.add_parser(name, help=text, formatter_class=fmt)
        p.add_argument("--prices", type=Path, default=bundled_fixture(),
                       help="CSV with header date,ticker,adj_close; defaults to the bundled synthetic fixture")
        p.add_argument("--index", default="SPY", help="index ticker")
        p.add_argument("--window", type=_positive_int, default=100, help="weeks per fit (>= 30)")
        p.add_argument("--high", type=float, default=1.4, help="null bound for the high-beta test")
        p.add_argument("--low", type=float, default=0.8, help="null bound for the low-beta test")
        p.add_argument("--crit", type=float, default=finlab.Z_CRIT,
                       help="one-sided critical value (exact 5%% normal quantile); 1.64 gives the rounded value")
        p.add_argument("--allow-gaps", action="store_true",
                       help="let a weekly return span calendar weeks with no prices "
                            "(otherwise it is marked missing)")
        _add_clip(p)
        if name == "backtest":
            p.add_argument("--ls-summary", action="store_true",
                           help="portfolio alpha/beta by least squares instead of norm-weighted")
        _add_common(p)
        p.set_defaults(func=func)

    p = sub.add_parser("replay", help="re-run a previous invocation from its manifest.json")
    p.add_argument("manifest", type=Path)
    p.add_argument("--out", required=True, type=Path, help="output directory")
    return parser


def _subparser(parser: argparse.ArgumentParser, name: str) -> argparse.ArgumentParser:
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            return action.choices[name]
    raise KeyError(name)


def manifest_config(args) -> dict:
    cfg = {}
    for k, v in sorted(vars(args).items()):
        if k in _NOT_CONFIG:
            continue
        if isinstance(v, Path):
            v = str(v.resolve())
        elif isinstance(v, float) and math.isinf(v):
            v = "inf" if v > 0 else "-inf"  # JSON has no infinity literal
        cfg[k] = v
    return cfg


def _argv_from_manifest(parser, manifest: dict) -> list[str]:
    command = manifest.get("command")
    if command not in {"fit", "simulate", "cvm", "roll", "backtest"}:
        raise InputError(f"manifest has unknown command {command!r}")
    sp = _subparser(parser, command)
    flags = {a.dest: a for a in sp._actions if a.option_strings}
    argv = [command]
    for key, value in manifest.get("config", {}).items():
        if key not in flags or key in _NOT_CONFIG:
            raise InputError(f"manifest has unknown setting {key!r}")
        action = flags[key]
        opt = action.option_strings[0]
        if isinstance(action, argparse._StoreTrueAction):
            if value:
                argv.append(opt)
        elif value is None:
            continue
        elif isinstance(value, list):
            argv += [opt, *map(_token, value)]
        else:
            argv += [opt, _token(value)]
    return argv


def _token(v) -> str:
    if isinstance(v, float):
        return "inf" if math.isinf(v) and v > 0 else repr(v)
    return str(v)


def run(args) -> None:
    out: Path = args.out
    out.mkdir(parents=True, exist_ok=True)
    write_json({"nwreg_version": __version__, "command": args.command,
                "config": manifest_config(args)}, out / MANIFEST)
    args.func(args, out)


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "replay":
            try:
                manifest = json.loads(args.manifest.read_text(encoding="utf-8"))
            except json.JSONDecodeError as exc:
                raise ParseError(f"manifest is not valid JSON: {exc}") from None
            replay_argv = _argv_from_manifest(parser, manifest) + ["--out", str(args.out)]
            args = parser.parse_args(replay_argv)
        run(args)
    except NwregError as exc:
        print(f"nwreg: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (OSError, ValueError) as exc:
        print(f"nwreg: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
