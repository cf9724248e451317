"""Dataset container and its on-disk format.

A dataset file is a CSV run table preceded by a JSON header block whose
lines are prefixed with ``#``::

    # {
    #   "schema_version": "1.0",
    #   ...
    # }
    run_id,group,kind,value,monitor_power_W,duration_s,wavelength_nm,attenuator_setting
    0,0,dut_counts,20655,4.1e-08,1.0,850.711,A_70dB

Simulated datasets carry their ground truth in a sidecar
``<stem>.truth.json`` next to the CSV.  Floats are written with ``repr`` and
wavelengths are shifted to nanometres by decimal exponent only, so
write/load is lossless.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from decimal import Decimal
from pathlib import Path
from typing import Iterable

from .measurement import AttenuatorSetting, RunKind, RunRecord, ValidationError

SCHEMA_VERSION = "1.0"
COLUMNS = (
    "run_id",
    "group",
    "kind",
    "value",
    "monitor_power_W",
    "duration_s",
    "wavelength_nm",
    "attenuator_setting",
)


class DatasetError(ValueError):
    """Malformed dataset file; carries line/column when known."""

    def __init__(self, message: str, line: int | None = None, column: str | None = None):
        self.line = line
        self.column = column
        loc = []
        if line is not None:
            loc.append(f"line {line}")
        if column is not None:
            loc.append(f"column {column}")
        super().__init__(f"{message} ({', '.join(loc)})" if loc else message)


@dataclass
class Dataset:
    metadata: dict
    runs: list[RunRecord]
    truth: dict | None = None

    def __post_init__(self) -> None:
        self.validate()

    def validate(self) -> None:
        version = self.metadata.get("schema_version")
        if version != SCHEMA_VERSION:
            raise DatasetError(f"unsupported schema version {version!r}")
        seen: set[int] = set()
        for r in self.runs:
            if r.run_id in seen:
                raise ValidationError(f"duplicate run_id {r.run_id}", "run_id", r.run_id)
            seen.add(r.run_id)

    @property
    def scenario(self) -> str | None:
        return self.metadata.get("scenario")

    def select(self, kind: RunKind | str | None = None, group: int | None = None,
               setting: AttenuatorSetting | str | None = None) -> list[RunRecord]:
        kind = RunKind(kind) if kind is not None else None
        setting = AttenuatorSetting(setting) if setting is not None else None
        return [
            r
            for r in self.runs
            if (kind is None or r.kind is kind)
            and (group is None or r.group == group)
            and (setting is None or r.attenuator_setting is setting)
        ]

    def groups(self, kind: RunKind | str | None = None) -> list[int]:
        return sorted({r.group for r in self.select(kind)})


# ---------------------------------------------------------------------------
# Number formatting
# ---------------------------------------------------------------------------
def _fmt(x: float) -> str:
    if float(x).is_integer() and abs(x) < 2**53:
        return str(int(x))
    return repr(float(x))


def _m_to_nm(x: float) -> str:
    d = Decimal(repr(float(x))).scaleb(9).normalize()
    return format(d, "f") if -20 < d.adjusted() < 20 else str(d)


def _nm_to_m(text: str) -> float:
    return float(Decimal(text).scaleb(-9))


def _json_dumps(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, allow_nan=True)


# ---------------------------------------------------------------------------
# Write / load
# ---------------------------------------------------------------------------
def dumps_dataset(ds: Dataset) -> str:
    out = io.StringIO()
    for line in _json_dumps(ds.metadata).splitlines():
        out.write(f"# {line}\n")
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(COLUMNS)
    for r in ds.runs:
        writer.writerow(
            [
                r.run_id,
                r.group,
                r.kind.value,
                _fmt(r.value),
                _fmt(r.monitor_power),
                _fmt(r.duration),
                _m_to_nm(r.wavelength),
                r.attenuator_setting.value,
            ]
        )
    return out.getvalue()


def truth_path(path: str | Path) -> Path:
    path = Path(path)
    return path.with_name(path.stem + ".truth.json")


def write_dataset(ds: Dataset, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dumps_dataset(ds), encoding="utf-8")
    if ds.truth is not None:
        truth_path(path).write_text(_json_dumps(ds.truth) + "\n", encoding="utf-8")
    return path


def _parse_header(lines: list[str]) -> tuple[dict, int]:
    header = []
    n = 0
    for n, line in enumerate(lines):
        if not line.startswith("#"):
            break
        header.append(line[1:])
    else:
        n = len(lines)
    if not header:
        raise DatasetError("missing JSON header block", line=1)
    try:
        meta = json.loads("\n".join(header))
    except json.JSONDecodeError as exc:
        raise DatasetError(f"header JSON: {exc.msg}", line=exc.lineno, column=str(exc.colno)) from None
    if not isinstance(meta, dict):
        raise DatasetError("header must be a JSON object", line=1)
    return meta, n


def _parse_rows(lines: Iterable[str], first_line: int) -> list[RunRecord]:
    reader = csv.reader(lines)
    try:
        columns = next(reader)
    except StopIteration:
        raise DatasetError("missing CSV column header", line=first_line) from None
    if tuple(columns) != COLUMNS:
        raise DatasetError(f"expected columns {','.join(COLUMNS)}", line=first_line)
    runs = []
    for offset, row in enumerate(reader, start=1):
        lineno = first_line + offset
        if not row:
            continue
        if len(row) != len(COLUMNS):
            raise DatasetError(f"expected {len(COLUMNS)} fields, got {len(row)}", line=lineno)
        fields = dict(zip(COLUMNS, row))
        parsed = {}
        for col, conv in (
            ("run_id", int),
            ("group", int),
            ("value", float),
            ("monitor_power_W", float),
            ("duration_s", float),
            ("wavelength_nm", _nm_to_m),
        ):
            try:
                parsed[col] = conv(fields[col])
            except (ValueError, ArithmeticError):
                raise DatasetError(f"cannot parse {fields[col]!r}", line=lineno, column=col) from None
        try:
            runs.append(
                RunRecord(
                    run_id=parsed["run_id"],
                    kind=fields["kind"],
                    value=parsed["value"],
                    monitor_power=parsed["monitor_power_W"],
                    duration=parsed["duration_s"],
                    wavelength=parsed["wavelength_nm"],
                    attenuator_setting=fields["attenuator_setting"],
                    group=parsed["group"],
                )
            )
        except ValidationError as exc:
            raise DatasetError(str(exc), line=lineno, column=exc.field) from exc
    return runs


def loads_dataset(text: str, truth: dict | None = None) -> Dataset:
    lines = text.splitlines()
    meta, n = _parse_header(lines)
    runs = _parse_rows(lines[n:], n + 1)
    return Dataset(meta, runs, truth)


def load_dataset(path: str | Path) -> Dataset:
    """Read and validate a dataset file (and its truth sidecar, if present)."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise DatasetError(f"cannot read {path}: {exc.strerror}") from None
    truth = None
    tp = truth_path(path)
    if tp.exists():
        try:
            truth = json.loads(tp.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise DatasetError(f"{tp.name}: {exc.msg}", line=exc.lineno, column=str(exc.colno)) from None
    return loads_dataset(text, truth)


def dump_json(obj, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(_json_dumps(obj) + "\n", encoding="utf-8")
    return path


# ---------------------------------------------------------------------------
# Active-area scan maps
# ---------------------------------------------------------------------------
SCAN_COLUMNS = ("x_m", "y_m", "counts")


@dataclass
class AreaScan:
    """Count map on a square raster; ``counts[row, col]`` sits at (x[col], y[row])."""

    x: "np.ndarray"
    y: "np.ndarray"
    counts: "np.ndarray"
    metadata: dict = field(default_factory=lambda: {"schema_version": SCHEMA_VERSION})
    truth: dict | None = None

    @property
    def step(self) -> float:
        return float(self.x[1] - self.x[0])


def dumps_area_scan(scan: AreaScan) -> str:
    out = io.StringIO()
    for line in _json_dumps(scan.metadata).splitlines():
        out.write(f"# {line}\n")
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(SCAN_COLUMNS)
    for i, y in enumerate(scan.y):
        for j, x in enumerate(scan.x):
            writer.writerow([repr(float(x)), repr(float(y)), _fmt(scan.counts[i, j])])
    return out.getvalue()


def write_area_scan(scan: AreaScan, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dumps_area_scan(scan), encoding="utf-8")
    if scan.truth is not None:
        truth_path(path).write_text(_json_dumps(scan.truth) + "\n", encoding="utf-8")
    return path


def load_area_scan(path: str | Path) -> AreaScan:
    import numpy as np

    path = Path(path)
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise DatasetError(f"cannot read {path}: {exc.strerror}") from None
    meta, n = _parse_header(lines)
    if meta.get("schema_version") != SCHEMA_VERSION:
        raise DatasetError(f"unsupported schema version {meta.get('schema_version')!r}")
    reader = csv.reader(lines[n:])
    if tuple(next(reader, ())) != SCAN_COLUMNS:
        raise DatasetError(f"expected columns {','.join(SCAN_COLUMNS)}", line=n + 1)
    pts = []
    for offset, row in enumerate(reader, start=2):
        if not row:
            continue
        try:
            pts.append(tuple(float(v) for v in row))
        except ValueError:
            raise DatasetError("cannot parse scan row", line=n + offset) from None
        if len(row) != 3:
            raise DatasetError("expected 3 fields", line=n + offset)
    arr = np.array(pts)
    xs, ys = np.unique(arr[:, 0]), np.unique(arr[:, 1])
    if xs.size * ys.size != arr.shape[0]:
        raise DatasetError("scan rows do not form a complete raster")
    counts = np.empty((ys.size, xs.size))
    counts[np.searchsorted(ys, arr[:, 1]), np.searchsorted(xs, arr[:, 0])] = arr[:, 2]
    truth = None
    tp = truth_path(path)
    if tp.exists():
        truth = json.loads(tp.read_text(encoding="utf-8"))
    return AreaScan(xs, ys, counts, meta, truth)
