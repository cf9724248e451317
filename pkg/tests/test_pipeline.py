import numpy as np
import pytest

from spdcal.dataset import AreaScan
from spdcal.pipeline import (
    AnalysisError,
    NoPlateauError,
    analyze_tau_days,
    constants_from_metadata,
    find_flat_region,
    group_budget,
)
from spdcal.quantities import Quantity
from spdcal.simulator import SimConfig, dip_mask, scan_grid, simulate_area_scan, simulate_flux_sweep, simulate_tau_run


def disk_scan(radius=100e-6, step=10e-6, extent=300e-6):
    x = scan_grid(extent, step)
    xx, yy = np.meshgrid(x, x)
    counts = np.where(xx**2 + yy**2 <= radius**2, 1000.0, 0.0)
    return AreaScan(x, x.copy(), counts)


class TestFlatRegion:
    def test_uniform_disk_centre(self):
        r = find_flat_region(disk_scan(), 50e-6)
        assert (r.x, r.y) == (0.0, 0.0)
        assert r.score == 0.0

    def test_default_map_avoids_dips(self):
        scan = simulate_area_scan(SimConfig(), seed=0)
        r = find_flat_region(scan, 50e-6)
        assert not r.contains(scan.x, scan.y, dip_mask(scan))

    @pytest.mark.parametrize("seed", range(5))
    def test_avoids_dips_across_seeds(self, seed):
        scan = simulate_area_scan(SimConfig(), seed=seed)
        r = find_flat_region(scan, 50e-6)
        assert not r.contains(scan.x, scan.y, dip_mask(scan))

    def test_all_zero(self):
        scan = disk_scan()
        scan.counts[:] = 0.0
        with pytest.raises(NoPlateauError):
            find_flat_region(scan, 50e-6)

    def test_window_too_large(self):
        with pytest.raises(ValueError):
            find_flat_region(disk_scan(), 1e-3)

    def test_off_centre_plateau(self):
        scan = disk_scan()
        xx, _ = np.meshgrid(scan.x, scan.y)
        # Left half noisy, right half flat: the window must land on the right.
        rng = np.random.default_rng(0)
        noise = np.where(xx < 0, 1 + 0.05 * rng.standard_normal(xx.shape), 1.0)
        scan.counts = scan.counts * noise
        r = find_flat_region(scan, 30e-6)
        assert r.x > 0


class TestTauPipeline:
    def test_defaults_within_uncertainty(self):
        ds = simulate_tau_run(SimConfig(), seed=3)
        s = analyze_tau_days(ds)
        truth = ds.truth["tau"]
        assert abs(s.mean - truth) < 3 * s.sem
        assert s.tau.u == pytest.approx(s.sd)

    def test_missing_setting(self):
        ds = simulate_tau_run(SimConfig(), n_samples=3, n_days=1)
        ds.runs = [r for r in ds.runs if r.attenuator_setting.value != "A_40dB"]
        with pytest.raises(AnalysisError):
            analyze_tau_days(ds)


class TestConstants:
    def test_from_metadata(self):
        ds = simulate_flux_sweep(SimConfig(), rates=[1e4, 1e5, 1e6])
        k, tau = constants_from_metadata(ds.metadata)
        assert k.s.unit == "A/W"
        assert tau.value == pytest.approx(2.1601e-7)

    def test_override(self):
        ds = simulate_flux_sweep(SimConfig(), rates=[1e4, 1e5, 1e6])
        k, _ = constants_from_metadata(ds.metadata, {"s": {"value": 0.5, "u": 0.001, "unit": "A/W"}})
        assert k.s == Quantity(0.5, 0.001, "A/W")

    def test_missing(self):
        with pytest.raises(AnalysisError):
            constants_from_metadata({"constants": {}})


def test_group_budget_sums_to_100():
    cfg = SimConfig()
    ds = simulate_flux_sweep(cfg, rates=[2e4, 2e5, 2e6], seed=1)
    k, tau = constants_from_metadata(ds.metadata)
    point, rows = group_budget(ds, 1, k, tau)
    assert sum(r.percent for r in rows) == pytest.approx(100.0)
    assert point.group == 1
