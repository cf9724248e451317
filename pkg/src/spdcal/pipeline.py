"""Analysis of recorded or simulated datasets.

Each ``analyze_*`` function takes a :class:`~spdcal.dataset.Dataset` and
returns plain result objects; report rendering lives in :mod:`spdcal.report`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .dataset import AreaScan, Dataset
from .etalon import AIR_INDEX, FUSED_QUARTZ_INDEX
from .measurement import (
    AttenuationEstimate,
    AttenuatorSetting,
    Background,
    EfficiencyPoint,
    InstrumentConstants,
    RunKind,
    background_from_runs,
    compose_tau,
    corrected_mean,
    efficiency_point,
    epsilon_factor,
    estimate_tau_stage,
    uncertainty_budget,
    BudgetRow,
)
from .quantities import Quantity, mean_quantity
from .regression import SweepFit, ZeroFluxFit, fit_etalon_sweep, fit_zero_flux


class AnalysisError(RuntimeError):
    pass


class NoPlateauError(AnalysisError):
    pass


# ---------------------------------------------------------------------------
# Constants
# ---------------------------------------------------------------------------
def constants_from_metadata(
    meta: dict, overrides: dict | None = None
) -> tuple[InstrumentConstants, Quantity]:
    """Instrument constants and tau from a dataset header, with config overrides."""
    table = dict(meta.get("constants", {}))
    table.update(overrides or {})
    missing = [k for k in ("s", "C", "T", "lambda", "t", "tau") if k not in table]
    if missing:
        raise AnalysisError(f"constants missing from dataset/config: {', '.join(missing)}")
    q = {k: Quantity.from_dict(v) for k, v in table.items()}
    return InstrumentConstants(q["s"], q["C"], q["T"], q["lambda"], q["t"]), q["tau"]


# ---------------------------------------------------------------------------
# Attenuator characterisation
# ---------------------------------------------------------------------------
@dataclass
class TauSeries:
    per_day: list[AttenuationEstimate]
    mean: float
    sd: float  # day-to-day scatter
    sem: float  # standard error of the mean

    @property
    def tau(self) -> Quantity:
        """Day-series value with the day-to-day scatter as its uncertainty."""
        return Quantity(self.mean, self.sd)

    @property
    def tau_mean(self) -> Quantity:
        return Quantity(self.mean, self.sem)

    def scatter_chi2(self, relative_sd: float) -> tuple[float, int]:
        """chi2 of the daily values about their mean for an expected relative sd."""
        vals = np.array([d.tau.value for d in self.per_day])
        within = np.array([d.tau.u for d in self.per_day])
        var = (relative_sd * self.mean) ** 2 + within**2
        return float(((vals - vals.mean()) ** 2 / var).sum()), len(vals) - 1


def estimate_day_tau(ds: Dataset, day: int) -> AttenuationEstimate:
    runs = [r for r in ds.select(RunKind.SIPH_CURRENT, group=day)]
    if not runs:
        raise AnalysisError(f"no photodiode runs for day {day}")
    p_mean = float(np.mean([r.monitor_power for r in runs]))

    def corrected(setting):
        vals = [r.value * p_mean / r.monitor_power for r in runs if r.attenuator_setting is setting]
        if len(vals) < 2:
            raise AnalysisError(f"day {day}: fewer than 2 samples at {setting.value}")
        return vals

    bg = ds.select(RunKind.SIPH_BACKGROUND, group=day)
    a_env = mean_quantity([r.value for r in bg], "A") if len(bg) >= 2 else Quantity(0.0, 0.0, "A")
    a0 = corrected(AttenuatorSetting.REF_0dB)
    t30 = estimate_tau_stage(corrected(AttenuatorSetting.A_30dB), a0, a_env)
    t40 = estimate_tau_stage(corrected(AttenuatorSetting.A_40dB), a0, a_env)
    return compose_tau(t30, t40)


def analyze_tau_days(ds: Dataset) -> TauSeries:
    days = ds.groups(RunKind.SIPH_CURRENT)
    per_day = [estimate_day_tau(ds, d) for d in days]
    vals = np.array([e.tau.value for e in per_day])
    sd = float(vals.std(ddof=1)) if vals.size > 1 else per_day[0].tau.u
    return TauSeries(per_day, float(vals.mean()), sd, sd / math.sqrt(vals.size))


# ---------------------------------------------------------------------------
# Efficiency points
# ---------------------------------------------------------------------------
def dataset_background(ds: Dataset) -> Background:
    dut = ds.select(RunKind.DUT_BACKGROUND)
    si = ds.select(RunKind.SIPH_BACKGROUND)
    if len(dut) < 2 or len(si) < 2:
        raise AnalysisError("dataset needs at least two background runs of each kind")
    return background_from_runs(dut, si)


@dataclass
class GroupSignals:
    group: int
    n_corr: Quantity
    a_corr: Quantity
    eps: Quantity
    wavelength: float


def group_signals(ds: Dataset, group: int) -> GroupSignals:
    dut = ds.select(RunKind.DUT_COUNTS, group=group)
    si = ds.select(RunKind.SIPH_CURRENT, group=group)
    if len(dut) < 2 or len(si) < 2:
        raise AnalysisError(f"group {group} needs at least two DUT and two Si-ph runs")
    n_corr, _ = corrected_mean(dut, "counts")
    a_corr, _ = corrected_mean(si, "A")
    eps = epsilon_factor(
        mean_quantity([r.monitor_power for r in dut], "W"),
        mean_quantity([r.monitor_power for r in si], "W"),
    )
    lam = float(np.mean([r.wavelength for r in dut]))
    return GroupSignals(group, n_corr, a_corr, eps, lam)


def efficiency_points(
    ds: Dataset,
    constants: InstrumentConstants,
    tau: Quantity,
    per_group_wavelength: bool = False,
) -> tuple[list[EfficiencyPoint], list[GroupSignals], Background]:
    bg = dataset_background(ds)
    points, signals = [], []
    for g in ds.groups(RunKind.DUT_COUNTS):
        sig = group_signals(ds, g)
        k = constants
        if per_group_wavelength:
            rel = constants.wavelength.relative_u
            k = constants.with_wavelength(Quantity(sig.wavelength, rel * sig.wavelength, "m"))
        points.append(efficiency_point(sig.n_corr, bg, sig.a_corr, tau, sig.eps, k, group=g))
        signals.append(sig)
    return points, signals, bg


def group_budget(
    ds: Dataset, group: int, constants: InstrumentConstants, tau: Quantity
) -> tuple[EfficiencyPoint, list[BudgetRow]]:
    bg = dataset_background(ds)
    sig = group_signals(ds, group)
    point = efficiency_point(sig.n_corr, bg, sig.a_corr, tau, sig.eps, constants, group=group)
    return point, uncertainty_budget(sig.n_corr, bg, sig.a_corr, tau, sig.eps, constants)


@dataclass
class FluxSweepResult:
    points: list[EfficiencyPoint]
    fit: ZeroFluxFit
    background: Background


def analyze_flux_sweep(
    ds: Dataset, constants: InstrumentConstants | None = None, tau: Quantity | None = None
) -> FluxSweepResult:
    k, t = constants_from_metadata(ds.metadata)
    points, _, bg = efficiency_points(ds, constants or k, tau or t)
    return FluxSweepResult(points, fit_zero_flux(points), bg)


@dataclass
class WavelengthSweepResult:
    wavelengths: list[float]
    points: list[EfficiencyPoint]
    fit: SweepFit


def analyze_wavelength_sweep(
    ds: Dataset,
    n: float = FUSED_QUARTZ_INDEX,
    n_a: float = AIR_INDEX,
    L_guess: float | None = None,
    constants: InstrumentConstants | None = None,
    tau: Quantity | None = None,
) -> WavelengthSweepResult:
    """Efficiency at every wavelength, then the window-fringe fit.

    The fit is weighted by the per-point statistical uncertainty; the shared
    scale factors (s, tau, ...) do not change the fringe shape.
    """
    k, t = constants_from_metadata(ds.metadata)
    points, signals, _ = efficiency_points(ds, constants or k, tau or t, per_group_wavelength=True)
    lam = [s.wavelength for s in signals]
    fit = fit_etalon_sweep(
        lam,
        [p.eta.value for p in points],
        [p.u_stat for p in points],
        n=n,
        n_a=n_a,
        L_guess=L_guess,
    )
    return WavelengthSweepResult(lam, points, fit)


# ---------------------------------------------------------------------------
# Active-area scan
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class FlatRegion:
    x: float
    y: float
    score: float
    half_width_px: int = 0
    row: int = 0
    col: int = 0

    def contains(self, xs: np.ndarray, ys: np.ndarray, mask: np.ndarray) -> bool:
        """True if any masked pixel falls inside the selected window."""
        h = self.half_width_px
        sub = mask[max(self.row - h, 0) : self.row + h + 1, max(self.col - h, 0) : self.col + h + 1]
        return bool(sub.any())


TIE_TOLERANCE = 1e-9


def find_flat_region(scan: AreaScan, window_size: float) -> FlatRegion:
    """Centre of the square window with the lowest relative spread (sd/mean).

    Only windows whose mean exceeds half the plateau median count; equally
    flat windows are resolved towards the centre of the scanned area.
    """
    counts = np.asarray(scan.counts, dtype=float)
    step = scan.step
    h = int(round(window_size / (2 * step)))
    size = 2 * h + 1
    ny, nx = counts.shape
    if window_size <= 0 or size > min(nx, ny):
        raise ValueError("window does not fit inside the scanned area")
    top = float(np.percentile(counts, 99))
    if top <= 0:
        raise NoPlateauError("map has no signal")
    plateau_median = float(np.median(counts[counts >= 0.5 * top]))

    win = np.lib.stride_tricks.sliding_window_view(counts, (size, size))
    mean = win.mean(axis=(-1, -2))
    sd = win.std(axis=(-1, -2))
    valid = mean > 0.5 * plateau_median
    if not valid.any():
        raise NoPlateauError("no window reaches half the plateau level")
    score = np.where(valid, sd / np.where(mean > 0, mean, 1.0), np.inf)
    best = score.min()
    rows, cols = np.nonzero(score <= best + TIE_TOLERANCE)
    cx, cy = 0.5 * (scan.x[0] + scan.x[-1]), 0.5 * (scan.y[0] + scan.y[-1])
    xs, ys = scan.x[cols + h], scan.y[rows + h]
    i = int(np.lexsort((cols, rows, (xs - cx) ** 2 + (ys - cy) ** 2))[0])
    r, c = int(rows[i] + h), int(cols[i] + h)
    return FlatRegion(float(scan.x[c]), float(scan.y[r]), float(score[rows[i], cols[i]]), h, r, c)
