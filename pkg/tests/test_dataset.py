import numpy as np
import pytest

from spdcal.dataset import (
    COLUMNS,
    Dataset,
    DatasetError,
    dumps_dataset,
    load_area_scan,
    load_dataset,
    loads_dataset,
    truth_path,
    write_area_scan,
    write_dataset,
)
from spdcal.measurement import RunRecord, ValidationError
from spdcal.simulator import SimConfig, simulate_area_scan, simulate_flux_sweep, simulate_wavelength_sweep

HEADER = '# {"schema_version": "1.0"}\n' + ",".join(COLUMNS) + "\n"


def test_flux_roundtrip(tmp_path):
    ds = simulate_flux_sweep(SimConfig(), seed=7)
    path = write_dataset(ds, tmp_path / "fluxsweep.csv")
    assert truth_path(path).exists()
    back = load_dataset(path)
    assert len(back.runs) == len(ds.runs)
    assert back.runs == ds.runs
    assert back.metadata == ds.metadata
    assert back.truth["eta0"] == ds.truth["eta0"]
    assert back.truth["source_power"] == list(ds.truth["source_power"])


def test_wavelengths_lossless(tmp_path):
    ds = simulate_wavelength_sweep(SimConfig(), seed=1)
    back = loads_dataset(dumps_dataset(ds))
    assert [r.wavelength for r in back.runs] == [r.wavelength for r in ds.runs]
    assert dumps_dataset(back) == dumps_dataset(ds)


def test_odd_floats_lossless():
    runs = [
        RunRecord(0, "dut_counts", 12345, 1.0000000000000002e-6, 0.1 + 0.2, 1e-7 / 3, "A_70dB"),
        RunRecord(1, "siph_current", 1.92807e-8, 4.04e-8, 1.0, 850.711e-9, "REF_0dB", group=3),
    ]
    ds = Dataset({"schema_version": "1.0"}, runs)
    assert loads_dataset(dumps_dataset(ds)).runs == runs


def test_duplicate_run_id():
    text = HEADER + "4,0,dut_counts,10,1e-6,1,850,A_70dB\n4,0,dut_counts,11,1e-6,1,850,A_70dB\n"
    with pytest.raises(ValidationError) as exc:
        loads_dataset(text)
    assert exc.value.run_id == 4
    assert "4" in str(exc.value)


def test_negative_duration():
    text = HEADER + "0,0,dut_counts,10,1e-6,-1,850,A_70dB\n"
    with pytest.raises(DatasetError) as exc:
        loads_dataset(text)
    assert exc.value.column == "duration"
    assert exc.value.line == 3


def test_unparseable_number():
    text = HEADER + "0,0,dut_counts,ten,1e-6,1,850,A_70dB\n"
    with pytest.raises(DatasetError) as exc:
        loads_dataset(text)
    assert exc.value.column == "value"


def test_bad_setting():
    with pytest.raises(DatasetError):
        loads_dataset(HEADER + "0,0,dut_counts,10,1e-6,1,850,A_20dB\n")


def test_schema_version():
    with pytest.raises(DatasetError):
        loads_dataset('# {"schema_version": "9"}\n' + ",".join(COLUMNS) + "\n")


def test_header_json_error():
    with pytest.raises(DatasetError) as exc:
        loads_dataset("# {not json\n" + ",".join(COLUMNS) + "\n")
    assert exc.value.line == 1


def test_missing_header():
    with pytest.raises(DatasetError):
        loads_dataset(",".join(COLUMNS) + "\n")


def test_wrong_columns():
    with pytest.raises(DatasetError):
        loads_dataset('# {"schema_version": "1.0"}\nrun_id,kind\n')


def test_missing_file(tmp_path):
    with pytest.raises(DatasetError):
        load_dataset(tmp_path / "nope.csv")


def test_select_and_groups():
    ds = simulate_flux_sweep(SimConfig(), rates=[1e4, 1e5, 1e6], seed=0)
    assert ds.groups("dut_counts") == [0, 1, 2]
    assert all(r.group == 1 for r in ds.select("siph_current", group=1))
    assert ds.scenario == "flux-sweep"


def test_area_scan_roundtrip(tmp_path):
    scan = simulate_area_scan(SimConfig(), seed=2)
    path = write_area_scan(scan, tmp_path / "areascan.csv")
    back = load_area_scan(path)
    assert np.array_equal(back.x, scan.x)
    assert np.array_equal(back.y, scan.y)
    assert np.array_equal(back.counts, scan.counts)
    assert back.truth == scan.truth
    assert back.metadata == scan.metadata


def test_area_scan_incomplete(tmp_path):
    p = tmp_path / "scan.csv"
    p.write_text('# {"schema_version": "1.0"}\nx_m,y_m,counts\n0,0,1\n1e-5,0,1\n0,1e-5,1\n')
    with pytest.raises(DatasetError):
        load_area_scan(p)
