"""Detection-efficiency calibration of free-space single-photon detectors."""

__version__ = "0.1.0"

from .quantities import (  # noqa: E402
    SI,
    MCResult,
    PhysicalConstants,
    Quantity,
    monte_carlo_propagate,
    propagate_power_product,
    propagate_sum,
)
from .measurement import (  # noqa: E402
    Background,
    InstrumentConstants,
    efficiency_point,
    uncertainty_budget,
)
from .regression import fit_etalon_sweep, fit_zero_flux  # noqa: E402

__all__ = [
    "SI",
    "MCResult",
    "PhysicalConstants",
    "Quantity",
    "monte_carlo_propagate",
    "propagate_power_product",
    "propagate_sum",
    "Background",
    "InstrumentConstants",
    "efficiency_point",
    "uncertainty_budget",
    "fit_etalon_sweep",
    "fit_zero_flux",
]
