"""Report container and renderers (table, CSV, JSON).

Stored uncertainties are always standard (K=1).  A coverage factor only
scales what is rendered; the JSON report records the factor it used.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

from . import __version__
from .measurement import BudgetRow
from .quantities import Quantity

BUDGET_HEADER = ("Coefficient", "Value", "Uncertainty", "% Contribution")
FORMATS = ("table", "csv", "json")


@dataclass
class Series:
    """A tidy table for plotting: one row per observation."""

    columns: tuple[str, ...]
    rows: list[tuple]


@dataclass
class Report:
    command: str
    quantities: dict[str, Quantity] = field(default_factory=dict)
    budget: list[BudgetRow] = field(default_factory=list)
    diagnostics: dict = field(default_factory=dict)
    series: dict[str, Series] = field(default_factory=dict)
    provenance: dict = field(default_factory=dict)

    def to_dict(self, coverage_factor: float = 1.0) -> dict:
        k = coverage_factor
        out: dict = {"command": self.command, "coverage_factor": k}
        if self.quantities:
            out["quantities"] = {
                name: {"value": q.value, "u": k * q.u, "unit": q.unit}
                for name, q in self.quantities.items()
            }
        if self.budget:
            out["budget"] = [
                {"name": r.name, "value": r.value, "u": k * r.u, "unit": r.unit, "percent": r.percent}
                for r in self.budget
            ]
        if self.diagnostics:
            out["diagnostics"] = _clean(self.diagnostics)
        if self.series:
            out["series"] = sorted(self.series)
        out["provenance"] = _clean(self.provenance)
        return out


def _clean(obj):
    """Make JSON-safe: non-finite floats become null, tuples become lists."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, float):
        return obj if math.isfinite(obj) else None
    if hasattr(obj, "item"):  # numpy scalar
        return _clean(obj.item())
    return obj


def file_digest(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def provenance(inputs: Sequence[str | Path] = (), seed: int | None = None, **extra) -> dict:
    prov = {
        "tool": "spdcal",
        "version": __version__,
        "inputs": {Path(p).name: file_digest(p) for p in inputs},
        "seed": seed,
    }
    prov.update(extra)
    return prov


# ---------------------------------------------------------------------------
# Rendering
# ---------------------------------------------------------------------------
def _g(x: float, digits: int = 6) -> str:
    return f"{x:.{digits}g}"


def _budget_rows(report: Report, k: float) -> list[tuple[str, str, str, str]]:
    rows = []
    for r in report.budget:
        unit = "" if r.unit in ("1", "") else f" {r.unit}"
        rows.append((r.name, _g(r.value) + unit, _g(k * r.u, 3) + unit, f"{r.percent:.3g}"))
    eta = report.quantities.get("eta")
    if eta is not None:
        rows.append(("eta", _g(eta.value, 4), _g(k * eta.u, 2), "100"))
    return rows


def _table(header: Sequence[str], rows: Sequence[Sequence[str]]) -> str:
    widths = [max(len(str(c)) for c in col) for col in zip(header, *rows)]
    lines = ["  ".join(str(c).ljust(w) for c, w in zip(header, widths)).rstrip()]
    lines.append("  ".join("-" * w for w in widths))
    for row in rows:
        lines.append("  ".join(str(c).ljust(w) for c, w in zip(row, widths)).rstrip())
    return "\n".join(lines) + "\n"


def _csv(header: Sequence[str], rows: Sequence[Sequence]) -> str:
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([repr(v) if isinstance(v, float) else v for v in row])
    return out.getvalue()


def write_budget_report(report: Report, format: str = "table", coverage_factor: float = 1.0) -> str:
    """Budget rows (and the combined eta row) as an aligned table or CSV.

    The CSV carries full-precision numbers so it is byte-stable for a given
    input; the table is rounded for reading.
    """
    if not report.budget:
        raise ValueError("report has no budget")
    k = coverage_factor
    if format == "csv":
        rows = [(r.name, r.value, k * r.u, r.unit, r.percent) for r in report.budget]
        eta = report.quantities.get("eta")
        if eta is not None:
            rows.append(("eta", eta.value, k * eta.u, eta.unit, 100.0))
        return _csv(("coefficient", "value", "uncertainty", "unit", "percent_contribution"), rows)
    if format == "table":
        return _table(BUDGET_HEADER, _budget_rows(report, k))
    raise ValueError(f"unknown budget format {format!r}")


def render(report: Report, format: str = "table", coverage_factor: float = 1.0) -> str:
    """Whole report as text; sections with no content are left out."""
    k = coverage_factor
    if format == "json":
        return json.dumps(report.to_dict(k), indent=2) + "\n"
    if format not in ("table", "csv"):
        raise ValueError(f"unknown format {format!r}")

    parts = []
    if report.quantities:
        header = ("quantity", "value", "uncertainty", "unit")
        if format == "csv":
            rows = [(n, q.value, k * q.u, q.unit) for n, q in report.quantities.items()]
            parts.append(_csv(header, rows))
        else:
            rows = [(n, _g(q.value, 8), _g(k * q.u, 3), q.unit) for n, q in report.quantities.items()]
            parts.append(_table(header, rows))
    if report.budget:
        parts.append(write_budget_report(report, format, k))
    if report.diagnostics and format == "table":
        diag = _clean(report.diagnostics)
        parts.append(_table(("diagnostic", "value"), [(n, json.dumps(v)) for n, v in diag.items()]))
    if format == "table" and k != 1.0:
        parts.append(f"uncertainties expanded with k = {k:g}\n")
    return "\n".join(parts)


def write_report(report: Report, outdir: str | Path, coverage_factor: float = 1.0) -> list[Path]:
    """Write report.json, budget files and one CSV per series into ``outdir``."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    written = []

    def put(name: str, text: str) -> None:
        path = outdir / name
        path.write_text(text, encoding="utf-8")
        written.append(path)

    put("report.json", render(report, "json", coverage_factor))
    if report.budget:
        put("budget.csv", write_budget_report(report, "csv", coverage_factor))
        put("budget.txt", write_budget_report(report, "table", coverage_factor))
    for name in sorted(report.series):
        s = report.series[name]
        put(f"{name}.csv", _csv(s.columns, s.rows))
    return written
