"""Values with standard uncertainty and the two propagation engines.

First-order (GUM) propagation covers the pure product/quotient models and
the background subtractions used throughout the calibration chain.  The
Monte Carlo engine samples every input from a normal distribution and is
used as an independent cross-check of the first-order budget.

All inputs are treated as uncorrelated.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np


class UnitError(ValueError):
    """Unit tags are unknown or incompatible for the requested operation."""


class DomainError(ValueError):
    """An input lies outside the domain of the propagation formula."""


# ---------------------------------------------------------------------------
# Unit tags
# ---------------------------------------------------------------------------
# Dimension vectors over (kg, m, s, A).  Only unscaled SI symbols are accepted;
# wavelengths are carried in metres, never nanometres.
_SYMBOLS: dict[str, tuple[int, int, int, int]] = {
    "1": (0, 0, 0, 0),
    "counts": (0, 0, 0, 0),
    "kg": (1, 0, 0, 0),
    "m": (0, 1, 0, 0),
    "s": (0, 0, 1, 0),
    "A": (0, 0, 0, 1),
    "Hz": (0, 0, -1, 0),
    "J": (1, 2, -2, 0),
    "W": (1, 2, -3, 0),
}

# Preferred rendering for common derived dimensions.
_NAMED: dict[tuple[int, int, int, int], str] = {
    (0, 0, 0, 0): "1",
    (0, 1, 0, 0): "m",
    (0, 0, 1, 0): "s",
    (0, 0, 0, 1): "A",
    (0, 0, -1, 0): "1/s",
    (1, 2, -2, 0): "J",
    (1, 2, -3, 0): "W",
    (1, 2, -1, 0): "J·s",
    (0, 1, -1, 0): "m/s",
    (1, 3, -2, 0): "J·m",
    (-1, -2, 3, 1): "A/W",
    (1, 2, -3, -1): "W/A",
}

_TOKEN = re.compile(r"([A-Za-z]+|1)(?:\^(-?\d+))?$")


def parse_unit(tag: str) -> tuple[int, int, int, int]:
    """Return the (kg, m, s, A) dimension vector of a unit tag like ``"J·s"`` or ``"A/W"``."""
    text = tag.strip().replace("*", "·").replace(" ", "")
    if text in ("", "dimensionless"):
        return (0, 0, 0, 0)
    dims = [0, 0, 0, 0]
    num, _, den = text.partition("/")
    if "/" in den:
        raise UnitError(f"unit tag {tag!r} has more than one '/'")
    for part, sign in ((num, 1), (den, -1)):
        if not part:
            continue
        for token in part.split("·"):
            match = _TOKEN.match(token)
            if match is None or match.group(1) not in _SYMBOLS:
                raise UnitError(f"unknown unit symbol {token!r} in {tag!r}")
            power = int(match.group(2) or 1) * sign
            for i, d in enumerate(_SYMBOLS[match.group(1)]):
                dims[i] += d * power
    return tuple(dims)  # type: ignore[return-value]


def format_unit(dims: tuple[int, int, int, int]) -> str:
    if dims in _NAMED:
        return _NAMED[dims]
    parts = []
    for sym, d in zip(("kg", "m", "s", "A"), dims):
        if d == 1:
            parts.append(sym)
        elif d:
            parts.append(f"{sym}^{d}")
    return "·".join(parts)


def same_dimension(a: str, b: str) -> bool:
    return parse_unit(a) == parse_unit(b)


# ---------------------------------------------------------------------------
# Quantity
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class Quantity:
    """A value with its standard (K=1) uncertainty and a unit tag."""

    value: float
    u: float = 0.0
    unit: str = "1"

    def __post_init__(self) -> None:
        object.__setattr__(self, "value", float(self.value))
        object.__setattr__(self, "u", float(self.u))
        if not (math.isfinite(self.value) and math.isfinite(self.u)):
            raise DomainError(f"non-finite quantity {self.value!r} ± {self.u!r}")
        if self.u < 0:
            raise DomainError(f"negative standard uncertainty {self.u!r}")
        parse_unit(self.unit)

    @property
    def relative_u(self) -> float:
        if self.value == 0:
            raise DomainError("relative uncertainty of a zero value")
        return self.u / abs(self.value)

    def expanded(self, k: float = 1.0) -> float:
        """Expanded uncertainty for coverage factor ``k``."""
        if k <= 0:
            raise ValueError("coverage factor must be positive")
        return k * self.u

    def to_dict(self) -> dict:
        return {"value": self.value, "u": self.u, "unit": self.unit}

    @classmethod
    def from_dict(cls, d: dict) -> "Quantity":
        return cls(d["value"], d.get("u", 0.0), d.get("unit", "1"))

    def __str__(self) -> str:
        unit = "" if self.unit in ("1", "") else f" {self.unit}"
        return f"{self.value:.6g} ± {self.u:.2g}{unit}"


@dataclass(frozen=True)
class PhysicalConstants:
    """Exact SI defining constants."""

    h: Quantity = field(default_factory=lambda: Quantity(6.62607015e-34, 0.0, "J·s"))
    c: Quantity = field(default_factory=lambda: Quantity(299792458.0, 0.0, "m/s"))


SI = PhysicalConstants()


def mean_quantity(samples: Sequence[float], unit: str = "1") -> Quantity:
    """Arithmetic mean with Type A uncertainty sd/sqrt(n)."""
    x = np.asarray(samples, dtype=float)
    if x.size < 2:
        raise ValueError("at least two samples are needed for a Type A uncertainty")
    return Quantity(float(x.mean()), float(x.std(ddof=1) / math.sqrt(x.size)), unit)


# ---------------------------------------------------------------------------
# First-order propagation
# ---------------------------------------------------------------------------
def propagate_power_product(factors: Sequence[tuple[Quantity, int]]) -> Quantity:
    """Propagate ``prod(x_i ** k_i)`` by summing relative variances.

    ``u_rel(y)**2 = sum(k_i**2 * u_rel(x_i)**2)``; the unit is the product of
    the factor units raised to their exponents.
    """
    if not factors:
        raise ValueError("empty factor list")
    value = 1.0
    rel_var = 0.0
    dims = [0, 0, 0, 0]
    for q, k in factors:
        if not isinstance(k, (int, np.integer)) or isinstance(k, bool) or k == 0:
            raise DomainError(f"exponent must be a nonzero integer, got {k!r}")
        if q.value == 0:
            raise DomainError("zero-valued factor in a power product")
        value *= q.value ** int(k)
        rel_var += (k * q.u / q.value) ** 2
        for i, d in enumerate(parse_unit(q.unit)):
            dims[i] += d * int(k)
    return Quantity(value, abs(value) * math.sqrt(rel_var), format_unit(tuple(dims)))


def propagate_sum(a: Quantity, b: Quantity, sign: int = 1) -> Quantity:
    """``a + sign*b`` with uncertainties added in quadrature."""
    if sign not in (1, -1):
        raise ValueError("sign must be +1 or -1")
    if not same_dimension(a.unit, b.unit):
        raise UnitError(f"cannot combine {a.unit!r} with {b.unit!r}")
    return Quantity(a.value + sign * b.value, math.hypot(a.u, b.u), a.unit)


# ---------------------------------------------------------------------------
# Monte Carlo propagation
# ---------------------------------------------------------------------------
MIN_MC_SAMPLES = 1000
MAX_REJECT_FRACTION = 0.01


@dataclass
class MCResult:
    mean: float
    u: float
    n_samples: int
    histogram: np.ndarray
    bin_edges: np.ndarray
    n_rejected: int = 0

    def as_quantity(self, unit: str = "1") -> Quantity:
        return Quantity(self.mean, self.u, unit)


def _input_stream(seed: int, index: int) -> np.random.Generator:
    # One counter-based stream per input: draws do not depend on evaluation order.
    return np.random.Generator(np.random.Philox(key=[int(seed) & (2**64 - 1), index]))


def monte_carlo_propagate(
    model: Callable[..., np.ndarray | float],
    inputs: Sequence[Quantity],
    n_samples: int = 100_000,
    seed: int = 0,
    bins: int = 64,
) -> MCResult:
    """Sample each input from N(value, u), push the samples through ``model``.

    ``model`` is called with one positional array per input.  Samples where
    the model returns a non-finite value (or raises, in the scalar fallback)
    are rejected; more than 1% rejections is an error.
    """
    if n_samples < MIN_MC_SAMPLES:
        raise ValueError(f"n_samples must be >= {MIN_MC_SAMPLES}")
    draws = []
    for i, q in enumerate(inputs):
        if q.u == 0:
            draws.append(np.full(n_samples, q.value))
        else:
            draws.append(_input_stream(seed, i).normal(q.value, q.u, n_samples))

    with np.errstate(all="ignore"):
        try:
            out = np.asarray(model(*draws), dtype=float)
            if out.shape != (n_samples,):
                out = np.broadcast_to(out, (n_samples,)).astype(float)
        except (ArithmeticError, ValueError, TypeError):
            out = np.empty(n_samples)
            for j in range(n_samples):
                try:
                    out[j] = float(model(*(d[j] for d in draws)))
                except (ArithmeticError, ValueError, TypeError):
                    out[j] = np.nan

    ok = np.isfinite(out)
    n_rejected = int(n_samples - ok.sum())
    if n_rejected > MAX_REJECT_FRACTION * n_samples:
        raise DomainError(f"{n_rejected} of {n_samples} model evaluations failed")
    good = out[ok]
    mean = float(good.mean())
    if np.all(good == good[0]):
        mean, sd = float(good[0]), 0.0
        hist, edges = np.histogram(good, bins=1)
    else:
        sd = float(good.std(ddof=1))
        hist, edges = np.histogram(good, bins=bins)
    return MCResult(mean, sd, int(good.size), hist, edges, n_rejected)
