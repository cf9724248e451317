import dataclasses

import numpy as np
import pytest

from spdcal.dataset import dumps_area_scan, dumps_dataset
from spdcal.etalon import EtalonParams, window_transmittance
from spdcal.measurement import RunKind
from spdcal.pipeline import analyze_flux_sweep, analyze_tau_days, analyze_wavelength_sweep, efficiency_points
from spdcal.quantities import SI
from spdcal.simulator import (
    DetectorModel,
    PhotodiodeModel,
    SimConfig,
    dip_mask,
    expected_dut_rate,
    measured_rate,
    photodiode_current,
    power_for_rate,
    simulate_area_scan,
    simulate_flux_sweep,
    simulate_tau_run,
    simulate_wavelength_sweep,
    spad_counts,
)

FLAT = EtalonParams(visibility=0.0)
LAM = 850.711e-9


def detector(**kw):
    base = dict(eta_true=0.5, dead_time=0.0, dark_rate=0.0, window=FLAT)
    base.update(kw)
    return DetectorModel(**base)


class TestSpad:
    def test_blind_detector(self):
        det = detector(eta_true=0.0)
        assert all(spad_counts(1e6, det, LAM, 1.0, seed=s) == 0 for s in range(20))

    def test_poisson_mean(self):
        det = detector()
        mu = 1e4
        counts = np.array([spad_counts(2 * mu, det, LAM, 1.0, seed=s) for s in range(1000)])
        assert abs(counts.mean() - mu) < 3 * np.sqrt(mu / 1000)
        assert np.all(counts == np.round(counts))

    def test_dead_time_rate(self):
        det = detector(dead_time=25e-9)
        # 1e6 detected photons/s -> 1e6 / (1 + 0.025)
        assert float(measured_rate(2e6, det, LAM)) == pytest.approx(975609.76, abs=5e-3)
        det = dataclasses.replace(det, poisson=False)
        assert spad_counts(2e6, det, LAM, 1.0) == pytest.approx(1e6 / 1.025, rel=1e-14)

    def test_monotonic(self):
        det = detector(dead_time=25e-9)
        rates = np.geomspace(1e2, 3e7, 200)  # up to R*D = 0.375
        assert np.all(np.diff(measured_rate(rates, det, LAM)) > 0)

    def test_negative_rate(self):
        with pytest.raises(ValueError):
            spad_counts(-1.0, detector(), LAM, 1.0)


class TestPhotodiode:
    def test_dark_only(self):
        pd = PhotodiodeModel(relative_noise_sd=0.0, dark_noise_sd=0.0)
        assert photodiode_current(0.0, pd) == pd.dark_current

    def test_reference_current(self):
        # A - A_env = s * P / C with s in A/W.
        pd = PhotodiodeModel(relative_noise_sd=0.0, dark_noise_sd=0.0, calibration_C=1.0)
        power = 1.92807e-8 / 0.4766
        assert photodiode_current(power, pd) - pd.dark_current == pytest.approx(1.92807e-8, rel=1e-14)

    def test_seeded(self):
        pd = PhotodiodeModel()
        assert photodiode_current(1e-6, pd, seed=4) == photodiode_current(1e-6, pd, seed=4)
        assert photodiode_current(1e-6, pd, seed=4) != photodiode_current(1e-6, pd, seed=5)


class TestEnergyBookkeeping:
    def test_expected_rate(self):
        cfg = SimConfig().noiseless()
        det = cfg.detector
        p = 4e-2
        tau = cfg.attenuators.tau
        photons = p * tau * cfg.lens_T * LAM / (SI.h.value * SI.c.value)
        eta_eff = det.eta_true * float(window_transmittance(LAM, det.window))
        r = eta_eff * photons + det.dark_rate
        assert expected_dut_rate(p, cfg, LAM) == pytest.approx(r / (1 + r * det.dead_time), rel=1e-13)

    def test_power_inverse(self):
        cfg = SimConfig()
        rate = 3e5
        p = power_for_rate(rate, cfg, LAM)
        dark = cfg.detector.dark_rate / (1 + cfg.detector.dark_rate * cfg.detector.dead_time)
        assert expected_dut_rate(p, cfg, LAM) - dark == pytest.approx(rate, rel=1e-12)

    def test_unreachable(self):
        with pytest.raises(ValueError):
            power_for_rate(5e7, SimConfig(), LAM)

    def test_effective_efficiency_is_eta0(self):
        cfg = SimConfig()
        assert float(cfg.detector.efficiency(cfg.source.wavelength)) == pytest.approx(0.5526, rel=1e-14)

    def test_config_not_mutated(self):
        det = DetectorModel()
        SimConfig(detector=det)
        assert det.eta_true is None


class TestConfig:
    def test_dict_roundtrip(self):
        cfg = SimConfig()
        again = SimConfig.from_dict(cfg.to_dict())
        assert again == cfg

    def test_unknown_key(self):
        with pytest.raises(ValueError):
            SimConfig.from_dict({"bogus": 1})

    def test_nested_override(self):
        cfg = SimConfig.from_dict({"detector": {"dead_time": 30e-9}, "eta0": 0.5})
        assert cfg.detector.dead_time == 30e-9
        assert float(cfg.detector.efficiency(cfg.source.wavelength)) == pytest.approx(0.5)


class TestTauScenario:
    def test_noiseless_exact(self):
        cfg = SimConfig().noiseless()
        ds = simulate_tau_run(cfg, n_samples=5, n_days=3)
        series = analyze_tau_days(ds)
        assert series.mean == pytest.approx(2.1601e-7, rel=1e-12)
        for est in series.per_day:
            assert est.tau.value == pytest.approx(2.1601e-7, rel=1e-12)

    def test_seed_separation(self):
        cfg = SimConfig()
        a = simulate_tau_run(cfg, n_samples=10, n_days=2, seed=1)
        b = simulate_tau_run(cfg, n_samples=10, n_days=2, seed=2)
        assert dumps_dataset(a) != dumps_dataset(b)
        strip = lambda t: {k: v for k, v in t.items() if k != "per_day"}  # noqa: E731
        assert strip(a.truth) == strip(b.truth)

    def test_layout(self):
        ds = simulate_tau_run(SimConfig(), n_samples=7, n_days=2)
        assert len(ds.runs) == 2 * 7 * 5
        assert ds.groups() == [0, 1]


class TestFluxScenario:
    def test_truth_sidecar(self):
        ds = simulate_flux_sweep(SimConfig(), seed=3)
        assert ds.truth["eta0"] == pytest.approx(0.5526, rel=1e-14)
        assert ds.truth["dead_time"] == 25e-9

    def test_noiseless_no_dead_time(self):
        base = SimConfig().noiseless()
        cfg = dataclasses.replace(base, detector=dataclasses.replace(base.detector, dead_time=0.0))
        ds = simulate_flux_sweep(cfg)
        k = cfg.analysis_constants()
        pts, _, _ = efficiency_points(ds, k, cfg.stated_tau())
        for p in pts:
            assert p.eta.value == pytest.approx(0.5526, rel=1e-12)

    def test_noiseless_recovers_truth(self):
        cfg = SimConfig().noiseless()
        res = analyze_flux_sweep(simulate_flux_sweep(cfg))
        assert res.fit.eta0.value == pytest.approx(0.5526, rel=1e-10)
        assert res.fit.dead_time.value == pytest.approx(25e-9, rel=1e-10)

    def test_roundtrip(self):
        ds = simulate_flux_sweep(SimConfig(), seed=11)
        fit = analyze_flux_sweep(ds).fit
        assert abs(fit.eta0.value - ds.truth["eta0"]) < 2 * fit.eta0.u


class TestWavelengthScenario:
    def test_counts_near_target(self):
        ds = simulate_wavelength_sweep(SimConfig(), seed=2)
        counts = np.array([r.value for r in ds.select(RunKind.DUT_COUNTS)])
        assert counts.mean() == pytest.approx(1e5, rel=0.01)

    def test_flat_without_fringes(self):
        base = SimConfig()
        det = dataclasses.replace(base.detector, window=EtalonParams(visibility=0.0), eta_true=None)
        cfg = dataclasses.replace(base, detector=det)
        res = analyze_wavelength_sweep(simulate_wavelength_sweep(cfg, seed=4))
        assert res.fit.flagged
        assert abs(res.fit.baseline_slope.value) < 3 * res.fit.baseline_slope.u

    def test_roundtrip_thickness(self):
        ds = simulate_wavelength_sweep(SimConfig(), seed=0)
        fit = analyze_wavelength_sweep(ds).fit
        assert fit.optical_thickness.value == pytest.approx(ds.truth["optical_thickness"], rel=1e-3)


class TestAreaScan:
    def test_uniform_noiseless(self):
        base = SimConfig().noiseless()
        cfg = dataclasses.replace(base, detector=dataclasses.replace(base.detector, dips=()))
        scan = simulate_area_scan(cfg)
        xx, yy = np.meshgrid(scan.x, scan.y)
        r = np.hypot(xx, yy)
        det = cfg.detector
        inner = r <= det.active_area_diameter / 2 - 2 * det.beam_waist
        outer = r >= det.active_area_diameter / 2 + 2 * det.beam_waist
        plateau = scan.counts[inner]
        assert np.ptp(plateau) <= 1e-9 * plateau.mean()
        assert np.all(np.abs(scan.counts[outer]) <= 1e-9 * plateau.mean())

    def test_dips_below_plateau(self):
        cfg = SimConfig()
        scan = simulate_area_scan(cfg, seed=1)
        top = np.percentile(scan.counts, 99)
        plateau = np.median(scan.counts[scan.counts >= 0.5 * top])
        for d in cfg.detector.dips:
            i, j = np.argmin(np.abs(scan.y - d.y)), np.argmin(np.abs(scan.x - d.x))
            assert scan.counts[i, j] <= 0.8 * plateau
        assert dip_mask(scan).sum() > 0

    def test_grid(self):
        scan = simulate_area_scan(SimConfig())
        assert scan.counts.shape == (31, 31)
        assert scan.step == pytest.approx(10e-6)

    def test_extent_must_cover_area(self):
        with pytest.raises(ValueError):
            simulate_area_scan(SimConfig(), extent=100e-6)


class TestDeterminism:
    @pytest.mark.parametrize(
        "make",
        [
            lambda s: dumps_dataset(simulate_tau_run(SimConfig(), n_samples=10, n_days=2, seed=s)),
            lambda s: dumps_dataset(simulate_flux_sweep(SimConfig(), seed=s)),
            lambda s: dumps_dataset(simulate_wavelength_sweep(SimConfig(), seed=s)),
            lambda s: dumps_area_scan(simulate_area_scan(SimConfig(), seed=s)),
        ],
        ids=["tau", "flux", "wavelength", "scan"],
    )
    def test_same_seed_same_bytes(self, make):
        assert make(5) == make(5)
        assert make(5) != make(6)
