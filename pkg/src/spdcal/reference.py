"""Reference operating point of the Si-SPAD calibration at 850.711 nm.

These are the published budget inputs for one count-rate point, together
with the headline results the analysis chain is checked against.
"""

from __future__ import annotations

from .measurement import Background, InstrumentConstants, PointInputs
from .quantities import Quantity

# Ordered as the budget table is printed.
BUDGET_ORDER = ("N'", "N_env", "A'", "A_env", "tau", "eps", "s", "C", "T", "lambda", "t")

ETA = Quantity(0.5514, 0.0031)
ETA0 = Quantity(0.5526, 0.0029)
ETA0_MEAN = Quantity(0.5510, 0.0030)
TAU = Quantity(2.1601e-7, 0.0070e-7)
WAVELENGTH = Quantity(850.711e-9, 0.006e-9, "m")

PERCENT = {
    "N'": 5.47,
    "N_env": 0.012,
    "A'": 0.06,
    "A_env": 1.5e-8,
    "tau": 33.83,
    "eps": 5.70,
    "s": 51.55,
    "C": 3.2e-4,
    "T": 3.0e-3,
    "lambda": 1.6e-4,
    "t": 3.22,
}


def instrument_constants() -> InstrumentConstants:
    return InstrumentConstants(
        s=Quantity(0.4766, 1.9e-3, "A/W"),
        C=Quantity(1.000023, 1.0e-5),
        T=Quantity(0.985000, 3.0e-5),
        wavelength=WAVELENGTH,
        t=Quantity(1.0000, 1.0e-3, "s"),
    )


def reference_point() -> PointInputs:
    return PointInputs(
        n_corr=Quantity(20655, 27, "counts"),
        background=Background(
            n_env=Quantity(28, 1, "counts"),
            a_env=Quantity(4.88e-14, 1.3e-15, "A"),
        ),
        a_corr=Quantity(1.92807e-8, 4.9e-12, "A"),
        tau=TAU,
        eps=Quantity(1.0148, 1.4e-3),
        constants=instrument_constants(),
    )


def point_to_dict(p: PointInputs) -> dict:
    k = p.constants
    return {
        "N'": p.n_corr.to_dict(),
        "N_env": p.background.n_env.to_dict(),
        "A'": p.a_corr.to_dict(),
        "A_env": p.background.a_env.to_dict(),
        "tau": p.tau.to_dict(),
        "eps": p.eps.to_dict(),
        "s": k.s.to_dict(),
        "C": k.C.to_dict(),
        "T": k.T.to_dict(),
        "lambda": k.wavelength.to_dict(),
        "t": k.t.to_dict(),
    }


def point_from_dict(d: dict) -> PointInputs:
    missing = [name for name in BUDGET_ORDER if name not in d]
    if missing:
        raise ValueError(f"point file lacks {', '.join(missing)}")
    q = {name: Quantity.from_dict(d[name]) for name in BUDGET_ORDER}
    return PointInputs(
        n_corr=q["N'"],
        background=Background(q["N_env"], q["A_env"]),
        a_corr=q["A'"],
        tau=q["tau"],
        eps=q["eps"],
        constants=InstrumentConstants(q["s"], q["C"], q["T"], q["lambda"], q["t"]),
    )
