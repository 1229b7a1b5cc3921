"""Command-line batch interface: every command writes CSV/JSON files.

Exit codes: 0 success, 2 usage or parameter error, 3 data error,
4 numerical refusal.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import escape_analysis as ea
from . import streams
from .errors import DataError, FoldTipError, ParameterError, RefusalError
from .fingerprint import FingerprintConfig, extrapolate_propagator, fingerprint
from .normalform_fit import (
    MONTE_CARLO,
    QUASI_STATIC,
    epsilon_distribution,
    extract_normal_form,
    forecast,
    forecast_report,
)
from .sde_engine import GAUSSIAN, NODE_VARIANCES, REINIT_MODES, RESAMPLE, NormalFormParams, SimConfig, simulate_path
from .timeseries import TimeSeries, interpolate_uniform, parse_csv, parse_icecore, scale_warnings

log = logging.getLogger("foldtip")


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from exc


def _seed(text: str) -> int:
    try:
        return streams.check_seed(int(text))
    except (ValueError, ParameterError) as exc:
        raise argparse.ArgumentTypeError(str(exc)) from exc


def _add_record_args(p: argparse.ArgumentParser):
    p.add_argument("input", help="record file")
    p.add_argument("--format", choices=("csv", "icecore"), default="csv",
                   help="comma-separated (csv) or whitespace-delimited ice-core table (default: csv)")
    p.add_argument("--time-col", type=int, default=None,
                   help="0-based time/age column (default: 0 for csv, 1 for icecore)")
    p.add_argument("--value-col", type=int, default=None,
                   help="0-based value column (default: 1 for csv, 2 for icecore)")
    p.add_argument("--keep-age-direction", action="store_true",
                   help="icecore only: keep age before present instead of negating it")
    p.add_argument("--dt", type=float, required=True, help="uniform grid spacing [record time units]")
    p.add_argument("--bandwidth", type=float, required=True, help="Gaussian detrending bandwidth d [record time units]")
    p.add_argument("--cutoff", type=float, default=None,
                   help="cutoff time [record time units]; later samples are discarded before any processing")


def _add_sim_args(p: argparse.ArgumentParser, ensemble: int, step: float):
    p.add_argument("--seed", type=_seed, required=True, help="master seed (unsigned 64-bit integer)")
    p.add_argument("--ensemble", type=int, default=ensemble, help=f"ensemble size N (default: {ensemble})")
    p.add_argument("--step", type=float, default=step, help=f"integration step h [rescaled time] (default: {step})")
    p.add_argument("--reinit", choices=REINIT_MODES, default=RESAMPLE, help="re-initialization of escaped members")
    p.add_argument("--node-variance", choices=NODE_VARIANCES, default="paper",
                   help="variance convention for --reinit gaussian_at_node")
    p.add_argument("--parallel", action="store_true", help="multi-threaded kernel (results are identical)")


def _sim_config(args) -> SimConfig:
    return SimConfig(args.step, args.ensemble, args.seed, args.reinit, args.node_variance, args.parallel)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="foldtip", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fingerprint", help="sliding-window AR(1) propagator and decay-rate estimates")
    _add_record_args(p)
    p.add_argument("-w", "--half-width", type=int, action="append", required=True,
                   help="window half-width m in samples (window 2m+1); repeat for several outputs")
    p.add_argument("-o", "--output", required=True,
                   help="output CSV path; with several -w the half-width is inserted before the suffix")

    p = sub.add_parser("simulate", help="synthetic record from the drifting noisy normal form")
    p.add_argument("--seed", type=_seed, required=True, help="master seed (unsigned 64-bit integer)")
    p.add_argument("--a0", type=float, required=True, help="initial parameter a [1/time^2]")
    p.add_argument("--epsilon", type=float, required=True, help="drift speed da/dt = -epsilon [1/time^3]")
    p.add_argument("--sigma", type=float, required=True, help="noise amplitude [x/sqrt(time)]")
    p.add_argument("--t-end", type=float, required=True, help="record length [time]")
    p.add_argument("--dt", type=float, default=1.0, help="sampling interval of the written record [time] (default: 1)")
    p.add_argument("--substeps", type=int, default=20, help="integration steps per sampling interval (default: 20)")
    p.add_argument("--x-threshold", type=float, default=None,
                   help="escape threshold [x]; default -max(2 sqrt(a0), 5 sigma^(2/3))")
    p.add_argument("--q", type=float, default=1.0, help="scale of the written record z = z0 + q x (default: 1)")
    p.add_argument("--z0", type=float, default=0.0, help="offset of the written record (default: 0)")
    p.add_argument("-o", "--output", required=True, help="record CSV (time,value)")
    p.add_argument("--truth", default=None, help="ground-truth parameter JSON (default: <output>.truth.json)")

    p = sub.add_parser("escape-table", help="frozen-parameter escape rates k0(a) and their integral K0(a)")
    _add_sim_args(p, 400, 0.01)
    p.add_argument("--a-grid", type=_floats, default=None,
                   help="explicit comma-separated grid [rescaled a]; default from --a-min/--a-step")
    p.add_argument("--a-min", type=float, default=-0.5, help="lowest grid value (default: -0.5)")
    p.add_argument("--a-step", type=float, default=0.05, help="grid spacing (default: 0.05)")
    p.add_argument("--a-max", type=float, default=3.0, help="upper integration limit (default: 3)")
    p.add_argument("--hybrid-switch", type=float, default=2.5,
                   help="use the Kramers asymptote at and above this a (default: 2.5)")
    p.add_argument("--burn-in", type=float, default=20.0, help="transient discarded per point [rescaled time]")
    p.add_argument("--measure", type=float, default=None,
                   help="measuring time per point [rescaled time]; default adapts to the expected rate")
    p.add_argument("--x-threshold", type=float, default=-5.0, help="escape threshold [rescaled x] (default: -5)")
    p.add_argument("--tail", action="store_true", help="add the analytic Kramers integral beyond a_max")
    p.add_argument("--workers", type=int, default=1, help="grid points computed concurrently (default: 1)")
    p.add_argument("-o", "--output", required=True, help="table CSV (a,k0,k0_stderr,K0)")

    p = sub.add_parser("percentiles", help="escape percentiles versus drift speed, quasi-static and dynamic")
    _add_sim_args(p, 400, 0.01)
    p.add_argument("--table", required=True, help="escape table CSV from the escape-table command")
    p.add_argument("--epsilon", type=_floats, default=[0.001, 0.01, 0.1],
                   help="comma-separated rescaled drift speeds (default: 0.001,0.01,0.1)")
    p.add_argument("--levels", type=_floats, default=list(ea.DEFAULT_LEVELS),
                   help="comma-separated percent levels in (0,100) (default: 5,25,50,75,95)")
    p.add_argument("--a0", type=float, default=3.0, help="start of the dynamic runs [rescaled a] (default: 3)")
    p.add_argument("--x-threshold", type=float, default=-5.0, help="escape threshold [rescaled x] (default: -5)")
    p.add_argument("--no-dynamic", action="store_true", help="skip the ensemble runs")
    p.add_argument("-o", "--output", required=True, help="CSV (epsilon,level,a_quasistatic,a_dynamic)")

    p = sub.add_parser("predict", help="fingerprint, normal-form fit and tipping forecast")
    _add_record_args(p)
    _add_sim_args(p, 1000, 0.01)
    p.add_argument("-w", "--half-width", type=int, required=True, help="window half-width m in samples")
    p.add_argument("--horizon", type=float, required=True, help="forecast horizon past the last window centre [time]")
    p.add_argument("--mode", choices=(MONTE_CARLO, QUASI_STATIC), default=MONTE_CARLO, help="forecast method")
    p.add_argument("--table", default=None, help="escape table CSV (required for quasi_static)")
    p.add_argument("--sigma-source", choices=("mean", "last"), default="mean",
                   help="normal-form noise from the record-mean or the last sigma_z estimate")
    p.add_argument("--report", required=True, help="report JSON path")
    p.add_argument("--cdf", default=None, help="CDF CSV path (time,P_a,P_esc)")
    return parser


# --- commands -------------------------------------------------------------------


def _load_record(args) -> TimeSeries:
    text = Path(args.input).read_text(encoding="utf-8-sig")
    if args.format == "csv":
        series = parse_csv(text, 0 if args.time_col is None else args.time_col,
                           1 if args.value_col is None else args.value_col)
    else:
        series = parse_icecore(text, 1 if args.time_col is None else args.time_col,
                               2 if args.value_col is None else args.value_col,
                               reverse_time=not args.keep_age_direction)
    if series.skipped_rows:
        log.info("skipped %d unusable rows", series.skipped_rows)
    if args.cutoff is not None:
        keep = series.times <= args.cutoff
        if keep.sum() < 2:
            raise DataError(f"fewer than 2 samples before the cutoff {args.cutoff}")
        series = TimeSeries(series.times[keep], series.values[keep], series.label, series.unit)
    return series


def _half_width_path(path: str, m: int, several: bool) -> Path:
    p = Path(path)
    return p.with_name(f"{p.stem}_m{m}{p.suffix}") if several else p


def cmd_fingerprint(args) -> int:
    configs = [FingerprintConfig(m, args.dt, args.bandwidth) for m in args.half_width]
    series = interpolate_uniform(_load_record(args), args.dt)
    several = len(configs) > 1
    for cfg in configs:
        scale_warnings(args.dt, args.bandwidth, cfg.window)
        fp = fingerprint(series, cfg)
        path = _half_width_path(args.output, cfg.window_half_width, several)
        path.write_text(fp.to_csv())
        try:
            t_hat, slope = extrapolate_propagator(fp)
            log.info("m=%d: propagator slope %.6g, linear crossing of c=1 at t=%.6g", cfg.window_half_width, slope, t_hat)
        except DataError:
            pass
    return 0


def cmd_simulate(args) -> int:
    if args.substeps < 1 or not args.dt > 0 or not args.t_end > args.dt:
        raise ParameterError("need substeps >= 1, dt > 0 and t_end > dt")
    if args.q == 0:
        raise ParameterError("q must be non-zero")
    x_th = args.x_threshold
    if x_th is None:
        x_th = -max(2.0 * math.sqrt(max(args.a0, 0.0)), 5.0 * args.sigma ** (2.0 / 3.0), 1e-3)
    params = NormalFormParams(a0=args.a0, epsilon=args.epsilon, sigma=args.sigma, x_threshold=x_th)
    h = args.dt / args.substeps
    config = SimConfig(step=h, ensemble_size=2, seed=args.seed)
    path = simulate_path(params, config, args.t_end)
    rows = path.t.size - 1
    keep = np.arange(0, rows + 1, args.substeps)
    record = TimeSeries(path.t[keep], args.z0 + args.q * path.x[keep])
    Path(args.output).write_text(record.to_csv())
    truth = {
        "a0": args.a0, "epsilon": args.epsilon, "sigma": args.sigma, "q": args.q, "z0": args.z0,
        "dt": args.dt, "step": h, "x_threshold": x_th, "seed": args.seed,
        "escaped_at": path.escaped_at,
        "epsilon_over_sigma2": args.epsilon / args.sigma**2 if args.sigma > 0 else None,
    }
    truth_path = Path(args.truth) if args.truth else Path(args.output).with_suffix(".truth.json")
    truth_path.write_text(json.dumps(truth, indent=2) + "\n")
    return 0


def cmd_escape_table(args) -> int:
    config = _sim_config(args)
    if args.a_grid is not None:
        grid = np.array(args.a_grid)
    else:
        if not args.a_step > 0 or args.a_min >= args.a_max:
            raise ParameterError("need a_step > 0 and a_min < a_max")
        count = int(math.floor((args.a_max - args.a_min) / args.a_step + 1e-9)) + 1
        grid = args.a_min + args.a_step * np.arange(count)
    if args.workers < 1:
        raise ParameterError("workers must be >= 1")
    table = ea.build_escape_table(
        grid, config, a_max=args.a_max, hybrid_switch=args.hybrid_switch, burn_in=args.burn_in,
        measure=args.measure, tail=args.tail, x_threshold=args.x_threshold, workers=args.workers,
    )
    Path(args.output).write_text(table.to_csv())
    return 0


def cmd_percentiles(args) -> int:
    config = _sim_config(args)
    if config.reinit_mode not in (RESAMPLE, GAUSSIAN):
        raise ParameterError("percentile runs need a re-initializing ensemble")
    table = ea.EscapeTable.from_csv(Path(args.table).read_text())
    qs = ea.percentile_surface(table, args.epsilon, args.levels)
    if args.no_dynamic:
        dyn = np.full_like(qs.a_at_percentile, np.nan)
    else:
        dyn = ea.dynamic_percentile_surface(args.epsilon, config, args.levels, a0=args.a0,
                                            x_threshold=args.x_threshold).a_at_percentile
    lines = ["epsilon,level,a_quasistatic,a_dynamic"]
    for i, eps in enumerate(qs.epsilon_grid):
        for j, level in enumerate(qs.percentile_levels):
            lines.append(f"{float(eps)!r},{float(level)!r},{float(qs.a_at_percentile[i, j])!r},{float(dyn[i, j])!r}")
    Path(args.output).write_text("\n".join(lines) + "\n")
    return 0


def cmd_predict(args) -> int:
    fp_cfg = FingerprintConfig(args.half_width, args.dt, args.bandwidth)
    config = _sim_config(args)
    if not args.horizon > 0:
        raise ParameterError("horizon must be positive")
    table = None
    if args.mode == QUASI_STATIC:
        if args.table is None:
            raise ParameterError("--mode quasi_static needs --table")
        table = ea.EscapeTable.from_csv(Path(args.table).read_text())

    series = interpolate_uniform(_load_record(args), args.dt)
    scale_warnings(args.dt, args.bandwidth, fp_cfg.window)
    fp = fingerprint(series, fp_cfg)
    cutoff = float(series.times[-1])
    try:
        est = extract_normal_form(fp, args.sigma_source)
    except RefusalError as exc:
        report = forecast_report(None, None, refusal=str(exc), cutoff_time=cutoff)
        Path(args.report).write_text(report.to_json() + "\n")
        raise
    sampler = epsilon_distribution(est)
    fc = forecast(est, sampler, config, args.horizon, args.mode, table)
    report = forecast_report(fc, est, sampler, cutoff_time=cutoff)
    Path(args.report).write_text(report.to_json() + "\n")
    if args.cdf:
        Path(args.cdf).write_text(fc.to_csv())
    return 0


COMMANDS = {
    "fingerprint": cmd_fingerprint,
    "simulate": cmd_simulate,
    "escape-table": cmd_escape_table,
    "percentiles": cmd_percentiles,
    "predict": cmd_predict,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ParameterError as exc:
        print(f"foldtip: parameter error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"foldtip: data error: {exc}", file=sys.stderr)
        return 3
    except RefusalError as exc:
        print(f"foldtip: prediction refused: {exc}", file=sys.stderr)
        return 4
    except FoldTipError as exc:
        print(f"foldtip: {exc}", file=sys.stderr)
        return 4
    except OSError as exc:
        print(f"foldtip: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
