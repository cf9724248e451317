import json

import pytest

from spdcal.cli import main
from spdcal.dataset import load_dataset
from spdcal.quantities import Quantity
from spdcal.reference import BUDGET_ORDER, PERCENT, reference_point
from spdcal.report import Report, Series, render, write_budget_report, write_report


def table_report():
    p = reference_point()
    return Report("budget", quantities={"eta": p.efficiency().eta}, budget=p.budget())


class TestBudgetReport:
    def test_row_order(self):
        lines = write_budget_report(table_report(), "table").splitlines()
        assert lines[0].split("  ")[0] == "Coefficient"
        assert "% Contribution" in lines[0]
        names = [ln.split()[0] for ln in lines[2:]]
        assert names == [*BUDGET_ORDER, "eta"]

    def test_csv_values(self):
        text = write_budget_report(table_report(), "csv")
        rows = [ln.split(",") for ln in text.splitlines()[1:]]
        pct = {r[0]: float(r[4]) for r in rows}
        for name in ("s", "tau", "N'", "eps", "t"):
            assert abs(pct[name] - PERCENT[name]) <= 1.5
        assert float(rows[-1][1]) == pytest.approx(0.5514, abs=1e-4)

    def test_csv_byte_stable(self):
        assert write_budget_report(table_report(), "csv") == write_budget_report(table_report(), "csv")

    def test_requires_budget(self):
        with pytest.raises(ValueError):
            write_budget_report(Report("x"), "csv")

    def test_coverage_factor(self):
        rep = table_report()
        k1 = json.loads(render(rep, "json"))
        k2 = json.loads(render(rep, "json", coverage_factor=2.0))
        assert k2["quantities"]["eta"]["u"] == pytest.approx(2 * k1["quantities"]["eta"]["u"])
        assert k2["quantities"]["eta"]["value"] == k1["quantities"]["eta"]["value"]
        assert k2["coverage_factor"] == 2.0
        assert rep.quantities["eta"].u == pytest.approx(0.0031, abs=1e-4)  # stored value untouched


class TestRender:
    def test_empty_sections_omitted(self):
        rep = Report("x", quantities={"a": Quantity(1.0, 0.1, "m")})
        text = render(rep, "table")
        assert "Coefficient" not in text and "diagnostic" not in text
        data = json.loads(render(rep, "json"))
        assert "budget" not in data and "diagnostics" not in data and "series" not in data

    def test_quantities_carry_unit_and_u(self):
        data = json.loads(render(table_report(), "json"))
        for q in data["quantities"].values():
            assert set(q) == {"value", "u", "unit"}
        for row in data["budget"]:
            assert {"value", "u", "unit"} <= set(row)

    def test_nan_becomes_null(self):
        rep = Report("x", diagnostics={"alias": float("nan")})
        assert json.loads(render(rep, "json"))["diagnostics"]["alias"] is None

    def test_write_report_files(self, tmp_path):
        rep = table_report()
        rep.series["s"] = Series(("a", "b"), [(1, 0.5)])
        names = sorted(p.name for p in write_report(rep, tmp_path))
        assert names == ["budget.csv", "budget.txt", "report.json", "s.csv"]
        assert (tmp_path / "s.csv").read_text() == "a,b\n1,0.5\n"


def run_cli(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def data(tmp_path_factory):
    d = tmp_path_factory.mktemp("data")
    assert run_cli("simulate", "--seed", 7, "-o", d) == 0
    return d


class TestCli:
    def test_simulate_files(self, data):
        for name in ("taudays", "fluxsweep", "wlsweep", "areascan"):
            assert (data / f"{name}.csv").exists()
            assert (data / f"{name}.truth.json").exists()
        assert (data / "tablepoint.json").exists()

    def test_single_scenario(self, tmp_path):
        assert run_cli("simulate", "--scenario", "flux-sweep", "--seed", 7, "-o", tmp_path) == 0
        assert sorted(p.name for p in tmp_path.iterdir()) == ["fluxsweep.csv", "fluxsweep.truth.json"]

    def test_zero_flux_roundtrip(self, data, tmp_path, capsys):
        assert run_cli("zero-flux", "-i", data / "fluxsweep.csv", "-o", tmp_path) == 0
        rep = json.loads((tmp_path / "report.json").read_text())
        truth = load_dataset(data / "fluxsweep.csv").truth
        eta0 = rep["quantities"]["eta0"]
        dead = rep["quantities"]["dead_time"]
        assert abs(eta0["value"] - truth["eta0"]) < 2 * eta0["u"]
        assert abs(dead["value"] - truth["dead_time"]) < 3 * dead["u"]
        assert len(rep["diagnostics"]["covariance_intercept_slope"]) == 2
        assert rep["provenance"]["seed"] == 7
        assert "fluxsweep.csv" in rep["provenance"]["inputs"]
        assert (tmp_path / "zero_flux_fit.csv").exists()
        assert "eta0" in capsys.readouterr().out

    def test_budget_table_point(self, data, capsys):
        assert run_cli("budget", "-i", data / "tablepoint.json", "--format", "json") == 0
        rep = json.loads(capsys.readouterr().out)
        assert rep["quantities"]["eta"]["value"] == pytest.approx(0.5514, abs=2e-4)
        assert rep["quantities"]["eta"]["u"] == pytest.approx(0.0031, abs=2e-4)
        assert [r["name"] for r in rep["budget"]] == list(BUDGET_ORDER)

    def test_budget_from_dataset(self, data, capsys):
        assert run_cli("budget", "-i", data / "fluxsweep.csv", "--group", 2, "--format", "csv") == 0
        out = capsys.readouterr().out
        assert "coefficient,value" in out

    def test_budget_monte_carlo(self, data, capsys):
        args = ("budget", "-i", data / "tablepoint.json", "--mc-samples", 20000, "--format", "json")
        assert run_cli(*args) == 0
        rep = json.loads(capsys.readouterr().out)
        assert abs(rep["diagnostics"]["mc_vs_gum_relative"]) < 0.05

    def test_tau(self, data, capsys):
        assert run_cli("tau", "-i", data / "taudays.csv", "--format", "json") == 0
        rep = json.loads(capsys.readouterr().out)
        assert rep["quantities"]["tau"]["unit"] == "1"
        assert rep["diagnostics"]["n_days"] == 10

    def test_efficiency(self, data, tmp_path):
        assert run_cli("efficiency", "-i", data / "fluxsweep.csv", "-o", tmp_path) == 0
        assert (tmp_path / "efficiency_points.csv").read_text().startswith("group,rate_cps,eta")

    def test_sweep_fit(self, data, capsys):
        assert run_cli("sweep-fit", "-i", data / "wlsweep.csv", "--format", "json") == 0
        rep = json.loads(capsys.readouterr().out)
        truth = load_dataset(data / "wlsweep.csv").truth
        nl = rep["quantities"]["optical_thickness"]["value"]
        assert nl == pytest.approx(truth["optical_thickness"], rel=1e-3)

    def test_scan_flat(self, data, capsys):
        assert run_cli("scan-flat", "-i", data / "areascan.csv", "--window", 50e-6, "--format", "json") == 0
        rep = json.loads(capsys.readouterr().out)
        assert rep["quantities"]["x"]["unit"] == "m"

    def test_unknown_command(self):
        with pytest.raises(SystemExit) as exc:
            run_cli("frobnicate")
        assert exc.value.code == 2

    def test_missing_input_flag(self):
        with pytest.raises(SystemExit) as exc:
            run_cli("zero-flux")
        assert exc.value.code == 2

    def test_analysis_error(self, data, tmp_path, capsys):
        assert run_cli("zero-flux", "-i", tmp_path / "missing.csv") == 1
        assert "error" in capsys.readouterr().err
        # A tau dataset has no DUT background runs.
        assert run_cli("zero-flux", "-i", data / "taudays.csv") == 1

    def test_bad_config(self, data, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text("{oops")
        assert run_cli("zero-flux", "-i", data / "fluxsweep.csv", "--config", cfg) == 1

    def test_config_constants_override(self, data, tmp_path, capsys):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"constants": {"s": {"value": 0.5, "u": 0.0019, "unit": "A/W"}}}))
        run_cli("zero-flux", "-i", data / "fluxsweep.csv", "--format", "json")
        base = json.loads(capsys.readouterr().out)["quantities"]["eta0"]["value"]
        run_cli("zero-flux", "-i", data / "fluxsweep.csv", "--config", cfg, "--format", "json")
        new = json.loads(capsys.readouterr().out)["quantities"]["eta0"]["value"]
        assert new / base == pytest.approx(0.5 / 0.4766, rel=1e-9)


def _snapshot(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_cli_byte_identical(tmp_path, capsys):
    outs = []
    for trial in ("a", "b"):
        root = tmp_path / trial
        d = root / "data"
        assert main(["simulate", "--seed", "3", "-o", str(d)]) == 0
        for cmd, inp, extra in (
            ("tau", "taudays.csv", []),
            ("efficiency", "fluxsweep.csv", []),
            ("zero-flux", "fluxsweep.csv", []),
            ("sweep-fit", "wlsweep.csv", []),
            ("budget", "tablepoint.json", ["--mc-samples", "5000"]),
            ("scan-flat", "areascan.csv", []),
        ):
            assert main([cmd, "-i", str(d / inp), "-o", str(root / cmd), *extra]) == 0
        outs.append(capsys.readouterr().out.replace(str(root), "<root>"))
        # Paths differ between trials only by the root, which is not written into artifacts.
    a, b = _snapshot(tmp_path / "a"), _snapshot(tmp_path / "b")
    assert a.keys() == b.keys()
    assert a == b
    assert outs[0] == outs[1]
