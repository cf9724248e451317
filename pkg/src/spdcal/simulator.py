"""Virtual substitution-method apparatus.

Generates synthetic run tables for the attenuator characterisation, the
count-rate (flux) sweep, the wavelength sweep and the active-area scan.
Every random draw comes from a Philox stream keyed on
(seed, scenario tag, run id), so output does not depend on generation order.

Optical chain for the efficiency scenarios: the source delivers power P to
the reference port; the photodiode reads s*P/C + dark (REF_0dB path); the DUT
receives tau*T*P through the 70 dB path and its lens.  A monitor sees a
fixed fraction of P.  Dead time is applied as the non-paralyzable rate map
R -> R/(1 + R*D) before Poisson sampling.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.signal import fftconvolve

from . import __version__
from .dataset import SCHEMA_VERSION, AreaScan, Dataset
from .etalon import EtalonParams, visibility_for_swing, window_transmittance
from .measurement import AttenuatorSetting, InstrumentConstants, RunKind, RunRecord
from .quantities import SI, Quantity

HC = SI.h.value * SI.c.value

_TAGS = {"tau": 1, "flux": 2, "wavelength": 3, "scan": 4, "spad": 5, "photodiode": 6}


def keyed_rng(seed: int, tag: str, index: int = 0, sub: int = 0) -> np.random.Generator:
    """Counter-based generator for one (seed, scenario, run, draw-kind) cell."""
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFF, _TAGS[tag], int(index), int(sub)])
    return np.random.Generator(np.random.Philox(key=ss.generate_state(2, np.uint64)))


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------
@dataclass
class SourceModel:
    mean_power: float = 1.0e-6  # W at the reference port, attenuator characterisation
    relative_drift_sd: float = 3.0e-3  # run-to-run source fluctuation
    wavelength: float = 850.711e-9
    monitor_fraction: float = 0.5
    imbalance_sd: float = 1.4e-3  # DUT vs Si-ph group mean power mismatch

    def __post_init__(self) -> None:
        if self.mean_power <= 0:
            raise ValueError("mean_power must be positive")
        if self.relative_drift_sd < 0 or self.imbalance_sd < 0:
            raise ValueError("drift sd must be >= 0")


@dataclass(frozen=True)
class Dip:
    x: float
    y: float
    sigma: float
    depth: float

    @property
    def radius(self) -> float:
        """Extent counted as 'inside the dip' when checking scan windows."""
        return 2.0 * self.sigma


DEFAULT_DIPS = (
    Dip(-60e-6, 30e-6, 20e-6, 0.9),
    Dip(-55e-6, -35e-6, 20e-6, 0.9),
)


def _default_window() -> EtalonParams:
    return EtalonParams(n=1.45, L=0.5e-3, visibility=visibility_for_swing(0.05, 1.45))


@dataclass
class DetectorModel:
    eta_true: float | None = None  # intrinsic; None -> derived from SimConfig.eta0
    dead_time: float = 25e-9
    dark_rate: float = 28.0
    active_area_diameter: float = 200e-6
    window: EtalonParams = field(default_factory=_default_window)
    beam_waist: float = 40e-6
    dips: tuple[Dip, ...] = DEFAULT_DIPS
    poisson: bool = True

    def __post_init__(self) -> None:
        if self.eta_true is not None and not 0 <= self.eta_true <= 1:
            raise ValueError("eta_true must lie in [0, 1]")
        if self.dead_time < 0 or self.dark_rate < 0:
            raise ValueError("dead time and dark rate must be >= 0")

    def efficiency(self, lam) -> np.ndarray:
        """Effective efficiency through the package window."""
        return (self.eta_true or 0.0) * window_transmittance(lam, self.window)

    def eta_map(self, x, y) -> np.ndarray:
        """Intrinsic efficiency over the active area (disk minus Gaussian dips)."""
        x, y = np.asarray(x, dtype=float), np.asarray(y, dtype=float)
        eta = np.where(x**2 + y**2 <= (self.active_area_diameter / 2) ** 2, 1.0, 0.0)
        for d in self.dips:
            eta = eta * (1 - d.depth * np.exp(-((x - d.x) ** 2 + (y - d.y) ** 2) / (2 * d.sigma**2)))
        return (self.eta_true or 0.0) * eta


@dataclass
class PhotodiodeModel:
    sensitivity_s: float = 0.4766  # A/W
    dark_current: float = 4.88e-14
    relative_noise_sd: float = 1.3e-3
    dark_noise_sd: float = 6.5e-15  # additive, A
    calibration_C: float = 1.000023

    def __post_init__(self) -> None:
        if self.sensitivity_s <= 0:
            raise ValueError("sensitivity must be positive")


@dataclass
class AttenuatorBank:
    tau30_true: float = 1.0e-3
    tau40_true: float = 2.1601e-4
    day_to_day_relative_sd: float = 3.2e-3

    def __post_init__(self) -> None:
        if not (0 < self.tau30_true < 1 and 0 < self.tau40_true < 1):
            raise ValueError("stage transmissivities must lie in (0, 1)")

    @property
    def tau(self) -> float:
        return self.tau30_true * self.tau40_true


# Stated relative standard uncertainties written into dataset metadata for
# the analysis side; the simulator itself uses the exact configured values.
DEFAULT_STATED_U = {
    "s": 1.9e-3 / 0.4766,
    "C": 1.0e-5,
    "T": 3.0e-5 / 0.985,
    "lambda": 0.006 / 850.711,
    "t": 1.0e-3,
    "tau": 0.0070 / 2.1601,
}


@dataclass
class SimConfig:
    source: SourceModel = field(default_factory=SourceModel)
    detector: DetectorModel = field(default_factory=DetectorModel)
    photodiode: PhotodiodeModel = field(default_factory=PhotodiodeModel)
    attenuators: AttenuatorBank = field(default_factory=AttenuatorBank)
    eta0: float = 0.5526  # effective zero-flux efficiency at the source wavelength
    lens_T: float = 0.985
    acquisition_time: float = 1.0
    n_repeats: int = 25
    n_background: int = 25
    scan_photon_rate: float = 2.0e5
    stated_u: dict = field(default_factory=lambda: dict(DEFAULT_STATED_U))

    def __post_init__(self) -> None:
        if self.detector.eta_true is None:
            t_win = float(window_transmittance(self.source.wavelength, self.detector.window))
            self.detector = dataclasses.replace(self.detector, eta_true=self.eta0 / t_win)
        if not 0 < self.lens_T <= 1:
            raise ValueError("lens_T must lie in (0, 1]")
        if self.n_repeats < 2 or self.n_background < 2:
            raise ValueError("need at least two runs per group")

    def noiseless(self) -> "SimConfig":
        """Copy with every stochastic and dark contribution switched off."""
        return dataclasses.replace(
            self,
            source=dataclasses.replace(self.source, relative_drift_sd=0.0, imbalance_sd=0.0),
            detector=dataclasses.replace(self.detector, dark_rate=0.0, poisson=False),
            photodiode=dataclasses.replace(
                self.photodiode, dark_current=0.0, relative_noise_sd=0.0, dark_noise_sd=0.0
            ),
            attenuators=dataclasses.replace(self.attenuators, day_to_day_relative_sd=0.0),
        )

    def analysis_constants(self, wavelength: float | None = None) -> InstrumentConstants:
        lam = self.source.wavelength if wavelength is None else wavelength
        u = self.stated_u
        return InstrumentConstants(
            s=Quantity(self.photodiode.sensitivity_s, u["s"] * self.photodiode.sensitivity_s, "A/W"),
            C=Quantity(self.photodiode.calibration_C, u["C"] * self.photodiode.calibration_C),
            T=Quantity(self.lens_T, u["T"] * self.lens_T),
            wavelength=Quantity(lam, u["lambda"] * lam, "m"),
            t=Quantity(self.acquisition_time, u["t"] * self.acquisition_time, "s"),
        )

    def stated_tau(self) -> Quantity:
        tau = self.attenuators.tau
        return Quantity(tau, self.stated_u["tau"] * tau)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict | None) -> "SimConfig":
        d = dict(d or {})
        kw = {}
        sub = {
            "source": SourceModel,
            "photodiode": PhotodiodeModel,
            "attenuators": AttenuatorBank,
        }
        for name, typ in sub.items():
            if name in d:
                kw[name] = typ(**d.pop(name))
        if "detector" in d:
            det = dict(d.pop("detector"))
            if "window" in det:
                det["window"] = EtalonParams(**det["window"])
            if "dips" in det:
                det["dips"] = tuple(Dip(**x) if isinstance(x, dict) else Dip(*x) for x in det["dips"])
            kw["detector"] = DetectorModel(**det)
        if "stated_u" in d:
            kw["stated_u"] = {**DEFAULT_STATED_U, **d.pop("stated_u")}
        unknown = set(d) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ValueError(f"unknown simulator settings: {', '.join(sorted(unknown))}")
        return cls(**kw, **d)


# ---------------------------------------------------------------------------
# Detector primitives
# ---------------------------------------------------------------------------
def measured_rate(incident_rate, det: DetectorModel, lam: float):
    """Mean registered count rate for a given incident photon rate."""
    r_det = det.efficiency(lam) * np.asarray(incident_rate, dtype=float) + det.dark_rate
    return r_det / (1 + r_det * det.dead_time)


def _sample_counts(mean: float, det: DetectorModel, rng: np.random.Generator | None) -> float:
    if not det.poisson or rng is None:
        return float(mean)
    return float(rng.poisson(mean))


def spad_counts(
    incident_rate: float, det: DetectorModel, lam: float, t: float, seed: int | None = 0
) -> float:
    """Counts registered in ``t`` seconds (Poisson unless ``det.poisson`` is off)."""
    if not (math.isfinite(incident_rate) and incident_rate >= 0):
        raise ValueError("incident rate must be finite and >= 0")
    mean = float(measured_rate(incident_rate, det, lam)) * t
    rng = keyed_rng(seed, "spad") if seed is not None else None
    return _sample_counts(mean, det, rng)


def photodiode_current(
    power: float, pd: PhotodiodeModel, seed: int | None = 0, rng: np.random.Generator | None = None
) -> float:
    """Current s*P/C + dark with multiplicative and additive Gaussian noise."""
    if power < 0:
        raise ValueError("optical power must be >= 0")
    mean = pd.sensitivity_s * power / pd.calibration_C + pd.dark_current
    if pd.relative_noise_sd == 0 and pd.dark_noise_sd == 0:
        return mean
    if rng is None:
        rng = keyed_rng(seed or 0, "photodiode")
    z1, z2 = rng.standard_normal(2)
    return mean * (1 + pd.relative_noise_sd * z1) + pd.dark_noise_sd * z2


def expected_dut_rate(power: float, cfg: SimConfig, lam: float, tau: float | None = None) -> float:
    """Mean DUT count rate for source power ``power`` through the 70 dB path."""
    tau = cfg.attenuators.tau if tau is None else tau
    photons = power * tau * cfg.lens_T * lam / HC
    return float(measured_rate(photons, cfg.detector, lam))


def power_for_rate(rate: float, cfg: SimConfig, lam: float, tau: float | None = None) -> float:
    """Source power that yields a background-subtracted count rate ``rate``."""
    det = cfg.detector
    tau = cfg.attenuators.tau if tau is None else tau
    dark_measured = det.dark_rate / (1 + det.dark_rate * det.dead_time)
    m = rate + dark_measured
    if m * det.dead_time >= 1:
        raise ValueError(f"count rate {rate:g}/s is unreachable with dead time {det.dead_time:g} s")
    r_det = m / (1 - m * det.dead_time)
    photons = (r_det - det.dark_rate) / det.efficiency(lam)
    return float(photons * HC / (lam * tau * cfg.lens_T))


# ---------------------------------------------------------------------------
# Scenarios
# ---------------------------------------------------------------------------
def _metadata(cfg: SimConfig, scenario: str, seed: int, extra: dict | None = None) -> dict:
    k = cfg.analysis_constants()
    meta = {
        "schema_version": SCHEMA_VERSION,
        "scenario": scenario,
        "creation": {"tool": "spdcal", "version": __version__, "seed": int(seed)},
        "constants": {
            "s": k.s.to_dict(),
            "C": k.C.to_dict(),
            "T": k.T.to_dict(),
            "lambda": k.wavelength.to_dict(),
            "t": k.t.to_dict(),
            "tau": cfg.stated_tau().to_dict(),
        },
    }
    if extra:
        meta.update(extra)
    return meta


class _RunWriter:
    def __init__(self, cfg: SimConfig, seed: int, tag: str):
        self.cfg, self.seed, self.tag = cfg, seed, tag
        self.runs: list[RunRecord] = []

    def drift(self, run_id: int) -> float:
        sd = self.cfg.source.relative_drift_sd
        return 1.0 + sd * keyed_rng(self.seed, self.tag, run_id, 1).standard_normal() if sd else 1.0

    def add(self, kind, value, power, lam, setting, group):
        self.runs.append(
            RunRecord(
                run_id=len(self.runs),
                kind=kind,
                value=value,
                monitor_power=self.cfg.source.monitor_fraction * power,
                duration=self.cfg.acquisition_time,
                wavelength=lam,
                attenuator_setting=setting,
                group=group,
            )
        )

    def next_id(self) -> int:
        return len(self.runs)

    def dut(self, power_set: float, lam: float, tau: float, group: int) -> None:
        rid = self.next_id()
        p = power_set * self.drift(rid)
        mean = expected_dut_rate(p, self.cfg, lam, tau) * self.cfg.acquisition_time
        counts = _sample_counts(mean, self.cfg.detector, keyed_rng(self.seed, self.tag, rid, 2))
        self.add(RunKind.DUT_COUNTS, counts, p, lam, AttenuatorSetting.A_70dB, group)

    def siph(self, power_set: float, lam: float, setting, group: int, stage: float = 1.0) -> None:
        rid = self.next_id()
        p = power_set * self.drift(rid)
        a = photodiode_current(p * stage, self.cfg.photodiode, rng=keyed_rng(self.seed, self.tag, rid, 3))
        self.add(RunKind.SIPH_CURRENT, a, p, lam, setting, group)

    def backgrounds(self, lam: float, group: int, dut: bool = True) -> None:
        cfg = self.cfg
        for _ in range(cfg.n_background):
            rid = self.next_id()
            a = photodiode_current(0.0, cfg.photodiode, rng=keyed_rng(self.seed, self.tag, rid, 3))
            self.add(RunKind.SIPH_BACKGROUND, a, 0.0, lam, AttenuatorSetting.REF_0dB, group)
        if not dut:
            return
        for _ in range(cfg.n_background):
            rid = self.next_id()
            mean = float(measured_rate(0.0, cfg.detector, lam)) * cfg.acquisition_time
            n = _sample_counts(mean, cfg.detector, keyed_rng(self.seed, self.tag, rid, 2))
            self.add(RunKind.DUT_BACKGROUND, n, 0.0, lam, AttenuatorSetting.A_70dB, group)


def _realized_tau(cfg: SimConfig, seed: int, tag: str, day: int = 0) -> tuple[float, float]:
    sd = cfg.attenuators.day_to_day_relative_sd / math.sqrt(2)
    z = keyed_rng(seed, tag, day, 9).standard_normal(2) if sd else np.zeros(2)
    return cfg.attenuators.tau30_true * (1 + sd * z[0]), cfg.attenuators.tau40_true * (1 + sd * z[1])


def simulate_tau_run(cfg: SimConfig, n_samples: int = 100, n_days: int = 10, seed: int = 0) -> Dataset:
    """Repeated attenuator characterisation on ``n_days`` days.

    Each day draws perturbed stage transmissivities, then records photodiode
    background samples followed by ``n_samples`` readings at each setting.
    """
    if n_samples < 2 or n_days < 1:
        raise ValueError("need n_samples >= 2 and n_days >= 1")
    w = _RunWriter(cfg, seed, "tau")
    lam = cfg.source.wavelength
    p = cfg.source.mean_power
    per_day = []
    for day in range(n_days):
        t30, t40 = _realized_tau(cfg, seed, "tau", day)
        per_day.append({"day": day, "tau30": t30, "tau40": t40, "tau": t30 * t40})
        for _ in range(n_samples):
            rid = w.next_id()
            a = photodiode_current(0.0, cfg.photodiode, rng=keyed_rng(seed, "tau", rid, 3))
            w.add(RunKind.SIPH_BACKGROUND, a, p * w.drift(rid), lam, AttenuatorSetting.REF_0dB, day)
        for setting, stage in (
            (AttenuatorSetting.REF_0dB, 1.0),
            (AttenuatorSetting.A_30dB, t30),
            (AttenuatorSetting.A_40dB, t40),
            (AttenuatorSetting.A_70dB, t30 * t40),
        ):
            for _ in range(n_samples):
                w.siph(p, lam, setting, day, stage)
    att = cfg.attenuators
    truth = {
        "tau30": att.tau30_true,
        "tau40": att.tau40_true,
        "tau": att.tau,
        "day_relative_sd": att.day_to_day_relative_sd,
        "per_day": per_day,
        "config": cfg.to_dict(),
    }
    meta = _metadata(cfg, "tau-days", seed, {"n_samples": n_samples, "n_days": n_days})
    return Dataset(meta, w.runs, truth)


def default_flux_rates(n: int = 10) -> list[float]:
    return list(np.geomspace(5e3, 2e6, n))


def simulate_flux_sweep(cfg: SimConfig, rates: Sequence[float] | None = None, seed: int = 0) -> Dataset:
    """Efficiency runs at several count-rate levels (groups 0..n-1).

    The attenuator chain takes one realised value for the whole sweep (a
    single day's tau), so its error is common to all points.
    """
    rates = default_flux_rates() if rates is None else [float(r) for r in rates]
    if not rates or any(r <= 0 for r in rates) or list(rates) != sorted(rates):
        raise ValueError("rates must be positive and sorted")
    lam = cfg.source.wavelength
    t30, t40 = _realized_tau(cfg, seed, "flux")
    tau_real = t30 * t40
    w = _RunWriter(cfg, seed, "flux")
    powers = []
    for g, rate in enumerate(rates):
        p_set = power_for_rate(rate, cfg, lam, tau_real)
        powers.append(p_set)
        imb = cfg.source.imbalance_sd
        p_si = p_set * (1 + imb * keyed_rng(seed, "flux", 10_000 + g, 4).standard_normal()) if imb else p_set
        for _ in range(cfg.n_repeats):
            w.dut(p_set, lam, tau_real, g)
        for _ in range(cfg.n_repeats):
            w.siph(p_si, lam, AttenuatorSetting.REF_0dB, g)
    w.backgrounds(lam, len(rates))
    det = cfg.detector
    truth = {
        "eta0": float(det.efficiency(lam)),
        "eta_intrinsic": det.eta_true,
        "dead_time": det.dead_time,
        "dark_rate": det.dark_rate,
        "tau_realized": tau_real,
        "target_rates": rates,
        "source_power": powers,
        "background_group": len(rates),
        "config": cfg.to_dict(),
    }
    meta = _metadata(cfg, "flux-sweep", seed, {"background_group": len(rates)})
    return Dataset(meta, w.runs, truth)


def default_sweep_wavelengths(n: int = 301, start: float = 849.2e-9, span: float = 3.0e-9) -> list[float]:
    return list(np.linspace(start, start + span, n))


def simulate_wavelength_sweep(
    cfg: SimConfig,
    lambdas: Sequence[float] | None = None,
    fixed_counts: float = 1.0e5,
    seed: int = 0,
    n_repeats: int = 10,
) -> Dataset:
    """Paired DUT / Si-ph runs at each wavelength with the DUT count held near ``fixed_counts``."""
    lambdas = default_sweep_wavelengths() if lambdas is None else [float(x) for x in lambdas]
    if np.any(np.diff(lambdas) <= 0):
        raise ValueError("wavelengths must be strictly increasing")
    t30, t40 = _realized_tau(cfg, seed, "wavelength")
    tau_real = t30 * t40
    w = _RunWriter(cfg, seed, "wavelength")
    rate = fixed_counts / cfg.acquisition_time
    for g, lam in enumerate(lambdas):
        p_set = power_for_rate(rate, cfg, lam, tau_real)
        for _ in range(n_repeats):
            w.dut(p_set, lam, tau_real, g)
        for _ in range(n_repeats):
            w.siph(p_set, lam, AttenuatorSetting.REF_0dB, g)
    w.backgrounds(cfg.source.wavelength, len(lambdas))
    win = cfg.detector.window
    truth = {
        "n": win.n,
        "n_a": win.n_a,
        "L": win.L,
        "visibility": win.visibility,
        "optical_thickness": win.n * win.L,
        "eta_intrinsic": cfg.detector.eta_true,
        "dead_time": cfg.detector.dead_time,
        "fixed_counts": fixed_counts,
        "tau_realized": tau_real,
        "config": cfg.to_dict(),
    }
    meta = _metadata(
        cfg,
        "wavelength-sweep",
        seed,
        {"background_group": len(lambdas), "window_index": {"n": win.n, "n_a": win.n_a}},
    )
    return Dataset(meta, w.runs, truth)


def scan_grid(extent: float = 300e-6, step: float = 10e-6) -> np.ndarray:
    if step <= 0 or extent <= 0:
        raise ValueError("extent and step must be positive")
    n = int(round(extent / step))
    return (np.arange(n + 1) - n / 2) * step


def _response_map(cfg: SimConfig, x: np.ndarray, y: np.ndarray, oversample: int = 5) -> np.ndarray:
    """Beam-averaged efficiency at each pixel (Gaussian beam, 1/e^2 radius = waist)."""
    det = cfg.detector
    step = (x[1] - x[0]) / oversample
    w0 = det.beam_waist
    margin = int(math.ceil(2 * w0 / step))
    nx = (len(x) - 1) * oversample + 1 + 2 * margin
    ny = (len(y) - 1) * oversample + 1 + 2 * margin
    fx = x[0] + (np.arange(nx) - margin) * step
    fy = y[0] + (np.arange(ny) - margin) * step
    eta = det.eta_map(fx[None, :], fy[:, None])
    k = np.arange(-margin, margin + 1) * step
    r2 = k[None, :] ** 2 + k[:, None] ** 2
    # Truncate on a circle so pixels deeper than 2*w0 inside the disk see a flat field.
    kern = np.where(r2 <= (2 * w0) ** 2, np.exp(-2 * r2 / w0**2), 0.0)
    kern /= kern.sum()
    conv = fftconvolve(eta, kern, mode="same")
    conv = np.clip(conv, 0.0, None)
    return conv[margin : margin + len(y) * oversample : oversample, margin : margin + len(x) * oversample : oversample]


def simulate_area_scan(
    cfg: SimConfig, extent: float = 300e-6, step: float = 10e-6, seed: int = 0
) -> AreaScan:
    """Raster scan of the focused beam across the active area."""
    x = scan_grid(extent, step)
    y = x.copy()
    if extent < cfg.detector.active_area_diameter:
        raise ValueError("scan extent must cover the active area")
    resp = _response_map(cfg, x, y)
    det = cfg.detector
    r_det = resp * cfg.scan_photon_rate + det.dark_rate
    mean = r_det / (1 + r_det * det.dead_time) * cfg.acquisition_time
    if det.poisson:
        counts = keyed_rng(seed, "scan").poisson(mean).astype(float)
    else:
        counts = mean
    truth = {
        "dips": [{**dataclasses.asdict(d), "radius": d.radius} for d in det.dips],
        "active_area_diameter": det.active_area_diameter,
        "beam_waist": det.beam_waist,
        "center": [0.0, 0.0],
    }
    meta = {
        "schema_version": SCHEMA_VERSION,
        "scenario": "area-scan",
        "creation": {"tool": "spdcal", "version": __version__, "seed": int(seed)},
    }
    return AreaScan(x, y, counts, meta, truth)


def dip_mask(scan: AreaScan, dips: Sequence[Dip] | None = None) -> np.ndarray:
    """Boolean map of pixels lying within a dip's radius of its centre."""
    if dips is None:
        dips = [Dip(d["x"], d["y"], d["sigma"], d["depth"]) for d in (scan.truth or {}).get("dips", [])]
    xx, yy = np.meshgrid(scan.x, scan.y)
    mask = np.zeros(xx.shape, dtype=bool)
    for d in dips:
        mask |= (xx - d.x) ** 2 + (yy - d.y) ** 2 <= d.radius**2
    return mask
