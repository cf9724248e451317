"""Command-line entry point: ``spdcal <command> [options]``.

Every command prints its report to stdout in the chosen ``--format`` and,
given ``-o DIR``, also writes report.json, budget files and plot series
there.  Exit status is 0 on success, 1 on an analysis or input error and
2 on a usage error.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
from pathlib import Path

import numpy as np
from scipy import stats

from . import __version__
from .dataset import (
    Dataset,
    dump_json,
    load_area_scan,
    load_dataset,
    write_area_scan,
    write_dataset,
)
from .etalon import AIR_INDEX, FUSED_QUARTZ_INDEX
from .pipeline import (
    analyze_flux_sweep,
    analyze_tau_days,
    analyze_wavelength_sweep,
    constants_from_metadata,
    efficiency_points,
    find_flat_region,
    group_budget,
)
from .quantities import Quantity, monte_carlo_propagate
from .reference import point_from_dict, point_to_dict, reference_point
from .report import FORMATS, Report, Series, provenance, render, write_report
from .simulator import (
    SimConfig,
    simulate_area_scan,
    simulate_flux_sweep,
    simulate_tau_run,
    simulate_wavelength_sweep,
)

SCENARIO_FILES = {
    "tau-days": "taudays.csv",
    "flux-sweep": "fluxsweep.csv",
    "wavelength-sweep": "wlsweep.csv",
    "area-scan": "areascan.csv",
    "table-point": "tablepoint.json",
}
DEFAULT_DAY_SD = 3.2e-3


# ---------------------------------------------------------------------------
# Helpers
# ---------------------------------------------------------------------------
def _load_config(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        cfg = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ValueError(f"config {path}: {exc.msg} (line {exc.lineno})") from None
    if not isinstance(cfg, dict):
        raise ValueError(f"config {path}: expected a JSON object")
    return cfg


def _inputs(args) -> list[str]:
    return [p for p in (getattr(args, "input", None), args.config) if p]


def _dataset_seed(ds: Dataset):
    return ds.metadata.get("creation", {}).get("seed")


def _dataset_constants(ds: Dataset, config: dict):
    return constants_from_metadata(ds.metadata, config.get("constants"))


def _point_row(p) -> tuple:
    return (p.group, p.rate, p.eta.value, p.eta.u, p.u_stat, int(p.flagged))


POINT_COLUMNS = ("group", "rate_cps", "eta", "u_eta", "u_stat", "flagged")


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------
def cmd_simulate(args, config: dict) -> Report:
    cfg = SimConfig.from_dict(config.get("simulator"))
    outdir = Path(args.output or "data")
    scenarios = list(SCENARIO_FILES) if args.scenario == "all" else [args.scenario]
    written = {}
    for name in scenarios:
        path = outdir / SCENARIO_FILES[name]
        if name == "tau-days":
            write_dataset(simulate_tau_run(cfg, seed=args.seed), path)
        elif name == "flux-sweep":
            write_dataset(simulate_flux_sweep(cfg, seed=args.seed), path)
        elif name == "wavelength-sweep":
            write_dataset(simulate_wavelength_sweep(cfg, seed=args.seed), path)
        elif name == "area-scan":
            write_area_scan(simulate_area_scan(cfg, seed=args.seed), path)
        else:
            dump_json(point_to_dict(reference_point()), path)
        written[name] = str(path)
    rep = Report("simulate", provenance=provenance(_inputs(args), args.seed))
    rep.diagnostics = written
    args.output = None  # the data directory is the artifact; no report files
    return rep


def cmd_tau(args, config: dict) -> Report:
    ds = load_dataset(args.input)
    series = analyze_tau_days(ds)
    day_sd = args.expected_day_sd
    chi2, dof = series.scatter_chi2(day_sd)
    p = float(stats.chi2.sf(chi2, dof)) if dof > 0 else math.nan
    rep = Report("tau", provenance=provenance(_inputs(args), _dataset_seed(ds)))
    rep.quantities["tau"] = series.tau
    rep.quantities["tau_mean"] = series.tau_mean
    days = ds.groups("siph_current")
    for d, est in zip(days, series.per_day):
        rep.quantities[f"tau_day{d}"] = est.tau
    rep.diagnostics = {
        "n_days": len(days),
        "relative_day_sd": series.sd / series.mean,
        "expected_relative_day_sd": day_sd,
        "chi2": chi2,
        "dof": dof,
        "p_value": p,
        "consistent_at_1pct": bool(0.005 < p < 0.995) if dof > 0 else None,
    }
    rep.series["tau_days"] = Series(
        ("day", "tau", "u_tau", "tau30", "tau40"),
        [(d, e.tau.value, e.tau.u, e.tau_30.value, e.tau_40.value) for d, e in zip(days, series.per_day)],
    )
    return rep


def cmd_efficiency(args, config: dict) -> Report:
    ds = load_dataset(args.input)
    k, tau = _dataset_constants(ds, config)
    points, _, bg = efficiency_points(ds, k, tau, per_group_wavelength=args.per_group_wavelength)
    rep = Report("efficiency", provenance=provenance(_inputs(args), _dataset_seed(ds)))
    for p in points:
        rep.quantities[f"eta_group{p.group}"] = p.eta
    rep.quantities["N_env"] = bg.n_env
    rep.quantities["A_env"] = bg.a_env
    rep.diagnostics = {
        "n_points": len(points),
        "flagged_groups": [p.group for p in points if p.flagged],
        "rel_u_sys": points[0].rel_u_sys if points else None,
    }
    rep.series["efficiency_points"] = Series(POINT_COLUMNS, [_point_row(p) for p in points])
    return rep


def cmd_zero_flux(args, config: dict) -> Report:
    ds = load_dataset(args.input)
    k, tau = _dataset_constants(ds, config)
    res = analyze_flux_sweep(ds, k, tau)
    fit = res.fit
    rep = Report("zero-flux", provenance=provenance(_inputs(args), _dataset_seed(ds)))
    rep.quantities["eta0"] = fit.eta0
    rep.quantities["dead_time"] = fit.dead_time
    rep.quantities["rate_coefficient"] = fit.rate_coefficient
    rep.diagnostics = {
        "chi2": fit.chi2,
        "dof": fit.dof,
        "covariance_intercept_slope": fit.covariance.tolist(),
        "eta0_statistical_u": fit.eta0_stat,
        "rel_u_sys": fit.rel_u_sys,
        "positive_slope_flag": fit.flagged,
        "n_points": len(res.points),
    }
    rep.series["efficiency_points"] = Series(POINT_COLUMNS, [_point_row(p) for p in res.points])
    rates = [p.rate for p in res.points]
    grid = np.linspace(0.0, max(rates), 101)
    rep.series["zero_flux_fit"] = Series(
        ("rate_cps", "eta_fit"), [(float(r), float(fit.predict(r))) for r in grid]
    )
    return rep


def cmd_sweep_fit(args, config: dict) -> Report:
    ds = load_dataset(args.input)
    k, tau = _dataset_constants(ds, config)
    sweep = config.get("sweep", {})
    index = ds.metadata.get("window_index", {})
    n = args.n or sweep.get("n") or index.get("n") or FUSED_QUARTZ_INDEX
    n_a = args.n_a or sweep.get("n_a") or index.get("n_a") or AIR_INDEX
    L_guess = args.thickness_guess or sweep.get("L_guess")
    res = analyze_wavelength_sweep(ds, n=n, n_a=n_a, L_guess=L_guess, constants=k, tau=tau)
    fit = res.fit
    lo, hi = min(res.wavelengths), max(res.wavelengths)
    rep = Report("sweep-fit", provenance=provenance(_inputs(args), _dataset_seed(ds)))
    rep.quantities.update(
        optical_thickness=fit.optical_thickness,
        thickness=fit.thickness,
        visibility=fit.visibility,
        baseline_intercept=fit.baseline_intercept,
        baseline_slope=fit.baseline_slope,
    )
    rep.diagnostics = {
        "n": n,
        "n_a": n_a,
        "lambda_ref": fit.lambda_ref,
        "free_spectral_range_m": fit.free_spectral_range if fit.optical_thickness.value > 0 else None,
        "peak_to_trough": fit.peak_to_trough(lo, hi),
        "ambiguity_class": fit.ambiguity_class,
        "alias_delta_chi2": fit.alias_delta_chi2,
        "chi2": fit.residual_chi2,
        "dof": fit.dof,
        "iterations": fit.iterations,
        "flagged": fit.flagged,
    }
    rep.series["sweep_points"] = Series(
        ("wavelength_m", "eta", "u_eta", "u_stat"),
        [(lam, p.eta.value, p.eta.u, p.u_stat) for lam, p in zip(res.wavelengths, res.points)],
    )
    grid = np.linspace(lo, hi, 1001)
    rep.series["sweep_model"] = Series(
        ("wavelength_m", "eta_fit"), [(float(x), float(y)) for x, y in zip(grid, fit.model(grid))]
    )
    return rep


def cmd_budget(args, config: dict) -> Report:
    path = Path(args.input)
    rep = Report("budget", provenance=provenance(_inputs(args), args.seed if args.mc_samples else None))
    if path.suffix == ".json":
        try:
            inputs = point_from_dict(json.loads(path.read_text(encoding="utf-8")))
        except json.JSONDecodeError as exc:
            raise ValueError(f"{path}: {exc.msg} (line {exc.lineno})") from None
        point, rows = inputs.efficiency(), inputs.budget()
    else:
        ds = load_dataset(path)
        k, tau = _dataset_constants(ds, config)
        group = args.group if args.group is not None else ds.groups("dut_counts")[0]
        point, rows = group_budget(ds, group, k, tau)
        inputs = None
        rep.diagnostics["group"] = group
    rep.quantities["eta"] = point.eta
    rep.budget = rows
    rep.diagnostics["flagged"] = point.flagged
    if args.mc_samples:
        if inputs is None:
            raise ValueError("--mc-samples needs a point file (.json) input")
        model, qs = inputs.as_model()
        mc = monte_carlo_propagate(model, qs, n_samples=args.mc_samples, seed=args.seed)
        rep.quantities["eta_mc"] = mc.as_quantity()
        rep.diagnostics["mc_samples"] = mc.n_samples
        rep.diagnostics["mc_rejected"] = mc.n_rejected
        rep.diagnostics["mc_vs_gum_relative"] = (mc.u - point.eta.u) / point.eta.u
        centers = 0.5 * (mc.bin_edges[1:] + mc.bin_edges[:-1])
        rep.series["mc_histogram"] = Series(
            ("eta", "count"), [(float(c), int(h)) for c, h in zip(centers, mc.histogram)]
        )
    return rep


def cmd_scan_flat(args, config: dict) -> Report:
    scan = load_area_scan(args.input)
    region = find_flat_region(scan, args.window)
    # Positions are quantised to the scan step.
    u_pos = scan.step / math.sqrt(12)
    rep = Report("scan-flat", provenance=provenance(_inputs(args), scan.metadata.get("creation", {}).get("seed")))
    rep.quantities["x"] = Quantity(region.x, u_pos, "m")
    rep.quantities["y"] = Quantity(region.y, u_pos, "m")
    rep.diagnostics = {
        "flatness_score": region.score,
        "window_m": args.window,
        "window_px": 2 * region.half_width_px + 1,
        "step_m": scan.step,
    }
    j = region.col
    rep.series["scan_row"] = Series(
        ("x_m", "counts"), [(float(x), float(c)) for x, c in zip(scan.x, scan.counts[region.row])]
    )
    rep.series["scan_column"] = Series(
        ("y_m", "counts"), [(float(y), float(c)) for y, c in zip(scan.y, scan.counts[:, j])]
    )
    return rep


COMMANDS = {
    "simulate": cmd_simulate,
    "tau": cmd_tau,
    "efficiency": cmd_efficiency,
    "zero-flux": cmd_zero_flux,
    "sweep-fit": cmd_sweep_fit,
    "budget": cmd_budget,
    "scan-flat": cmd_scan_flat,
}


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------
def _positive(text: str) -> float:
    x = float(text)
    if not x > 0:
        raise argparse.ArgumentTypeError(f"must be positive, got {text}")
    return x


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-i", "--input", help="input dataset or point file")
    common.add_argument("-o", "--output", help="output directory")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--config", help="JSON config with 'constants' and 'simulator' sections")
    common.add_argument("--coverage-factor", type=_positive, default=1.0, metavar="K")
    common.add_argument("--format", choices=FORMATS, default="table")

    parser = argparse.ArgumentParser(prog="spdcal", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    p = sub.add_parser("simulate", parents=[common], help="generate synthetic datasets")
    p.add_argument("--scenario", choices=[*SCENARIO_FILES, "all"], default="all")

    p = sub.add_parser("tau", parents=[common], help="attenuator transmittance from a day series")
    p.add_argument("--expected-day-sd", type=_positive, default=DEFAULT_DAY_SD,
                   help="relative day-to-day sd for the scatter test (default %(default)s)")

    p = sub.add_parser("efficiency", parents=[common], help="efficiency per run group")
    p.add_argument("--per-group-wavelength", action="store_true",
                   help="use each group's own wavelength instead of the header value")

    sub.add_parser("zero-flux", parents=[common], help="extrapolate efficiency to zero count rate")

    p = sub.add_parser("sweep-fit", parents=[common], help="fit window fringes in a wavelength sweep")
    p.add_argument("--n", type=_positive, help="window refractive index")
    p.add_argument("--n-a", type=_positive, help="ambient refractive index")
    p.add_argument("--thickness-guess", type=_positive, metavar="L", help="window thickness guess (m)")

    p = sub.add_parser("budget", parents=[common], help="uncertainty budget for one point")
    p.add_argument("--group", type=int, help="run group when the input is a dataset")
    p.add_argument("--mc-samples", type=int, default=0, help="also run Monte Carlo with this many samples")

    p = sub.add_parser("scan-flat", parents=[common], help="locate the flattest region of an area scan")
    p.add_argument("--window", type=_positive, default=50e-6, help="window side (m, default %(default)s)")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command != "simulate" and not args.input:
        parser.error(f"{args.command} requires -i/--input")
    try:
        config = _load_config(args.config)
        report = COMMANDS[args.command](args, config)
        sys.stdout.write(render(report, args.format, args.coverage_factor))
        if args.output:
            write_report(report, args.output, args.coverage_factor)
    except (ValueError, RuntimeError, OSError, KeyError) as exc:
        print(f"spdcal: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
