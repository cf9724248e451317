"""Substitution-method arithmetic.

The detector under test (DUT) counts photons behind the calibrated attenuator
chain while a traceable silicon photodiode (Si-ph) measures the unattenuated
beam.  This module turns raw run records into source-corrected signals,
attenuation estimates, per-run efficiencies and the uncertainty budget.

The photodiode sensitivity ``s`` is handled as a responsivity (A/W): the
efficiency formula is dimensionless only with that reading, and the
simulator's photodiode model inverts the same relation.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .quantities import (
    SI,
    DomainError,
    PhysicalConstants,
    Quantity,
    mean_quantity,
    propagate_power_product,
    propagate_sum,
)

WAVELENGTH_MIN = 300e-9
WAVELENGTH_MAX = 1100e-9
FLAG_THRESHOLD = 1.0


class DegenerateSignalError(DomainError):
    """Signal does not exceed background, so the ratio is undefined."""


class ValidationError(ValueError):
    """A record field violates its invariant."""

    def __init__(self, message: str, field: str | None = None, run_id: int | None = None):
        self.field = field
        self.run_id = run_id
        where = []
        if run_id is not None:
            where.append(f"run_id={run_id}")
        if field is not None:
            where.append(f"field={field}")
        super().__init__(f"{message} ({', '.join(where)})" if where else message)


class RunKind(str, enum.Enum):
    DUT_COUNTS = "dut_counts"
    SIPH_CURRENT = "siph_current"
    DUT_BACKGROUND = "dut_background"
    SIPH_BACKGROUND = "siph_background"

    @property
    def is_background(self) -> bool:
        return self in (RunKind.DUT_BACKGROUND, RunKind.SIPH_BACKGROUND)

    @property
    def is_counts(self) -> bool:
        return self in (RunKind.DUT_COUNTS, RunKind.DUT_BACKGROUND)


class AttenuatorSetting(str, enum.Enum):
    REF_0dB = "REF_0dB"
    A_30dB = "A_30dB"
    A_40dB = "A_40dB"
    A_70dB = "A_70dB"


@dataclass(frozen=True)
class RunRecord:
    """One acquisition: DUT counts in ``duration`` or a photodiode current reading.

    ``group`` ties runs of the same operating point together (flux level,
    wavelength, measurement day); monitor-power means are taken per group.
    """

    run_id: int
    kind: RunKind
    value: float
    monitor_power: float
    duration: float
    wavelength: float
    attenuator_setting: AttenuatorSetting
    group: int = 0

    def __post_init__(self) -> None:
        try:
            object.__setattr__(self, "kind", RunKind(self.kind))
        except ValueError:
            raise ValidationError(f"unknown run kind {self.kind!r}", "kind", self.run_id) from None
        try:
            object.__setattr__(
                self, "attenuator_setting", AttenuatorSetting(self.attenuator_setting)
            )
        except ValueError:
            raise ValidationError(
                f"unknown attenuator setting {self.attenuator_setting!r}",
                "attenuator_setting",
                self.run_id,
            ) from None
        for name in ("value", "monitor_power", "duration", "wavelength"):
            if not math.isfinite(getattr(self, name)):
                raise ValidationError("value is not finite", name, self.run_id)
        if self.duration <= 0:
            raise ValidationError("duration must be positive", "duration", self.run_id)
        if self.kind.is_counts and self.value < 0:
            raise ValidationError("counts must be non-negative", "value", self.run_id)
        if self.kind.is_background:
            if self.monitor_power < 0:
                raise ValidationError("monitor power must be >= 0", "monitor_power", self.run_id)
        elif self.monitor_power <= 0:
            raise ValidationError(
                "monitor power must be positive for signal runs", "monitor_power", self.run_id
            )
        if self.wavelength <= 0:
            raise ValidationError("wavelength must be positive", "wavelength", self.run_id)


@dataclass(frozen=True)
class Background:
    n_env: Quantity  # counts per acquisition window
    a_env: Quantity  # A

    def __post_init__(self) -> None:
        if self.n_env.value < 0 or self.a_env.value < 0:
            raise DomainError("background levels must be non-negative")


@dataclass(frozen=True)
class InstrumentConstants:
    s: Quantity  # photodiode responsivity, A/W
    C: Quantity  # picoammeter calibration factor
    T: Quantity  # lens transmissivity
    wavelength: Quantity  # m
    t: Quantity  # acquisition time, s

    def __post_init__(self) -> None:
        if self.s.value <= 0:
            raise DomainError("photodiode sensitivity must be positive")
        if self.C.value <= 0:
            raise DomainError("calibration factor must be positive")
        if not 0 < self.T.value <= 1:
            raise DomainError("lens transmissivity must lie in (0, 1]")
        if not WAVELENGTH_MIN <= self.wavelength.value <= WAVELENGTH_MAX:
            raise DomainError(f"wavelength {self.wavelength.value!r} m outside 300-1100 nm")
        if self.t.value <= 0:
            raise DomainError("acquisition time must be positive")

    def with_wavelength(self, wavelength: Quantity) -> "InstrumentConstants":
        return InstrumentConstants(self.s, self.C, self.T, wavelength, self.t)


@dataclass(frozen=True)
class AttenuationEstimate:
    tau_30: Quantity
    tau_40: Quantity
    tau: Quantity


@dataclass(frozen=True)
class CorrectionFactors:
    rho_per_run: dict[int, float]
    epsilon: Quantity


@dataclass(frozen=True)
class EfficiencyPoint:
    """Per-run efficiency.

    ``u_stat`` holds the part of ``eta.u`` coming from the run-level signals
    (counts, currents and their backgrounds); ``rel_u_sys`` is the relative
    uncertainty shared by every point of a sweep (s, tau, eps, C, T, lambda, t).
    """

    rate: float
    eta: Quantity
    u_stat: float = 0.0
    rel_u_sys: float = 0.0
    flagged: bool = False
    group: int | None = None


@dataclass(frozen=True)
class BudgetRow:
    name: str
    value: float
    u: float
    unit: str
    percent: float
    statistical: bool = False


# ---------------------------------------------------------------------------
# Source-fluctuation corrections
# ---------------------------------------------------------------------------
def source_correction_ratio(monitor_power: float, mean_monitor_power: float) -> float:
    if monitor_power <= 0 or mean_monitor_power <= 0:
        raise DomainError("monitor powers must be positive")
    return mean_monitor_power / monitor_power


def apply_source_correction(record: RunRecord, mean_monitor_power: float) -> float:
    """Scale a run's value by <P>/P_i, the monitor-power correction ratio."""
    return record.value * source_correction_ratio(record.monitor_power, mean_monitor_power)


def epsilon_factor(mean_p_dut: Quantity | float, mean_p_siph: Quantity | float) -> Quantity:
    """Imbalance of the mean source power between the DUT and Si-ph run groups."""
    p_dut = mean_p_dut if isinstance(mean_p_dut, Quantity) else Quantity(mean_p_dut, 0.0, "W")
    p_si = mean_p_siph if isinstance(mean_p_siph, Quantity) else Quantity(mean_p_siph, 0.0, "W")
    if p_dut.value <= 0 or p_si.value <= 0:
        raise DomainError("mean monitor powers must be positive")
    return propagate_power_product([(p_dut, 1), (p_si, -1)])


def corrected_mean(records: Sequence[RunRecord], unit: str) -> tuple[Quantity, dict[int, float]]:
    """Mean of rho-corrected values over one run group, with Type A uncertainty."""
    if len(records) < 2:
        raise ValueError("need at least two runs to form a corrected mean")
    p_mean = float(np.mean([r.monitor_power for r in records]))
    rho = {r.run_id: source_correction_ratio(r.monitor_power, p_mean) for r in records}
    corrected = [r.value * rho[r.run_id] for r in records]
    return mean_quantity(corrected, unit), rho


def source_corrections(
    dut_runs: Sequence[RunRecord], siph_runs: Sequence[RunRecord]
) -> CorrectionFactors:
    """rho for every run of both groups plus epsilon from the two monitor means."""
    _, rho_dut = corrected_mean(dut_runs, "counts")
    _, rho_si = corrected_mean(siph_runs, "A")
    p_dut = mean_quantity([r.monitor_power for r in dut_runs], "W")
    p_si = mean_quantity([r.monitor_power for r in siph_runs], "W")
    return CorrectionFactors({**rho_dut, **rho_si}, epsilon_factor(p_dut, p_si))


def background_from_runs(
    dut_background: Sequence[RunRecord], siph_background: Sequence[RunRecord]
) -> Background:
    return Background(
        mean_quantity([r.value for r in dut_background], "counts"),
        mean_quantity([r.value for r in siph_background], "A"),
    )


# ---------------------------------------------------------------------------
# Attenuation
# ---------------------------------------------------------------------------
def estimate_tau_stage(
    a_x: Sequence[float], a_0: Sequence[float], a_env: Quantity
) -> Quantity:
    """Stage transmissivity (mean(a_x) - A_env) / (mean(a_0) - A_env).

    A_env enters numerator and denominator, so its sensitivity coefficient
    is (tau - 1)/(mean(a_0) - A_env) rather than two independent terms.
    """
    mx = mean_quantity(a_x, "A")
    m0 = mean_quantity(a_0, "A")
    den = m0.value - a_env.value
    if den <= 0:
        raise DegenerateSignalError("reference current does not exceed the dark current")
    tau = (mx.value - a_env.value) / den
    u = math.sqrt(
        (mx.u / den) ** 2 + (tau * m0.u / den) ** 2 + ((tau - 1.0) * a_env.u / den) ** 2
    )
    return Quantity(tau, u, "1")


def compose_tau(tau_30: Quantity, tau_40: Quantity) -> AttenuationEstimate:
    for name, q in (("tau_30", tau_30), ("tau_40", tau_40)):
        if not 0 < q.value <= 1:
            raise DomainError(f"{name}={q.value!r} outside (0, 1]")
    return AttenuationEstimate(
        tau_30, tau_40, propagate_power_product([(tau_30, 1), (tau_40, 1)])
    )


# ---------------------------------------------------------------------------
# Efficiency and budget
# ---------------------------------------------------------------------------
_STATISTICAL = ("N'", "N_env", "A'", "A_env")


def _budget_terms(n_corr, background, a_corr, tau, eps, k, consts):
    """(name, quantity, d ln(eta)/dx) for each of the eleven budget rows."""
    dn = n_corr.value - background.n_env.value
    da = a_corr.value - background.a_env.value
    if dn <= 0:
        raise DegenerateSignalError("DUT counts do not exceed the background counts")
    if da <= 0:
        raise DegenerateSignalError("photodiode current does not exceed the dark current")
    return [
        ("N'", n_corr, 1.0 / dn),
        ("N_env", background.n_env, -1.0 / dn),
        ("A'", a_corr, -1.0 / da),
        ("A_env", background.a_env, 1.0 / da),
        ("tau", tau, -1.0 / tau.value),
        ("eps", eps, -1.0 / eps.value),
        ("s", k.s, 1.0 / k.s.value),
        ("C", k.C, -1.0 / k.C.value),
        ("T", k.T, -1.0 / k.T.value),
        ("lambda", k.wavelength, -1.0 / k.wavelength.value),
        ("t", k.t, -1.0 / k.t.value),
    ]


def efficiency_point(
    n_corr: Quantity,
    background: Background,
    a_corr: Quantity,
    tau: Quantity,
    eps: Quantity,
    k: InstrumentConstants,
    consts: PhysicalConstants = SI,
    group: int | None = None,
) -> EfficiencyPoint:
    """Detection efficiency of one run (group) from source-corrected signals.

    eta = h c / (lambda t) * s (N' - N_env) / (tau C eps (A' - A_env) T)

    ``a_corr`` carries only the rho correction; ``eps`` divides explicitly.
    """
    terms = _budget_terms(n_corr, background, a_corr, tau, eps, k, consts)
    dn = propagate_sum(n_corr, background.n_env, -1)
    da = propagate_sum(a_corr, background.a_env, -1)
    eta = propagate_power_product(
        [
            (consts.h, 1),
            (consts.c, 1),
            (k.wavelength, -1),
            (k.t, -1),
            (k.s, 1),
            (dn, 1),
            (tau, -1),
            (k.C, -1),
            (eps, -1),
            (da, -1),
            (k.T, -1),
        ]
    )
    stat = sum((q.u * d) ** 2 for name, q, d in terms if name in _STATISTICAL)
    sys_ = sum((q.u * d) ** 2 for name, q, d in terms if name not in _STATISTICAL)
    return EfficiencyPoint(
        rate=dn.value / k.t.value,
        eta=eta,
        u_stat=abs(eta.value) * math.sqrt(stat),
        rel_u_sys=math.sqrt(sys_),
        flagged=eta.value > FLAG_THRESHOLD,
        group=group,
    )


def uncertainty_budget(
    n_corr: Quantity,
    background: Background,
    a_corr: Quantity,
    tau: Quantity,
    eps: Quantity,
    k: InstrumentConstants,
    consts: PhysicalConstants = SI,
) -> list[BudgetRow]:
    """Relative-variance share (percent) of each input in the efficiency."""
    terms = _budget_terms(n_corr, background, a_corr, tau, eps, k, consts)
    shares = [(q.u * d) ** 2 for _, q, d in terms]
    total = sum(shares)
    return [
        BudgetRow(
            name,
            q.value,
            q.u,
            q.unit,
            100.0 * share / total if total > 0 else 0.0,
            name in _STATISTICAL,
        )
        for (name, q, _), share in zip(terms, shares)
    ]


@dataclass
class PointInputs:
    """The eleven inputs of one efficiency evaluation, as read from a point file."""

    n_corr: Quantity
    background: Background
    a_corr: Quantity
    tau: Quantity
    eps: Quantity
    constants: InstrumentConstants
    extra: dict = field(default_factory=dict)

    def efficiency(self, consts: PhysicalConstants = SI) -> EfficiencyPoint:
        return efficiency_point(
            self.n_corr, self.background, self.a_corr, self.tau, self.eps, self.constants, consts
        )

    def budget(self, consts: PhysicalConstants = SI) -> list[BudgetRow]:
        return uncertainty_budget(
            self.n_corr, self.background, self.a_corr, self.tau, self.eps, self.constants, consts
        )

    def as_model(self, consts: PhysicalConstants = SI):
        """(model, inputs) pair for Monte Carlo propagation of the same formula."""
        hc = consts.h.value * consts.c.value

        def model(n, n_env, a, a_env, tau, eps, s, c, t_lens, lam, t):
            return hc / (lam * t) * s * (n - n_env) / (tau * c * eps * (a - a_env) * t_lens)

        k = self.constants
        inputs = [
            self.n_corr,
            self.background.n_env,
            self.a_corr,
            self.background.a_env,
            self.tau,
            self.eps,
            k.s,
            k.C,
            k.T,
            k.wavelength,
            k.t,
        ]
        return model, inputs
