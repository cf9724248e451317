"""Optical-window (Fabry-Perot etalon) model for the detector package window.

The window is a plane-parallel slab of index ``n`` and thickness ``L`` in an
ambient medium of index ``n_a``.  Its reflection amplitude oscillates with
the round-trip phase 4*pi*n*L/lambda, which modulates the transmitted power
and hence the apparent detection efficiency.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

AIR_INDEX = 1.00027
FUSED_QUARTZ_INDEX = 1.4525


@dataclass(frozen=True)
class EtalonParams:
    n: float = 1.45
    L: float = 0.5e-3
    n_a: float = AIR_INDEX
    visibility: float = 1.0

    def __post_init__(self) -> None:
        if not self.n > self.n_a > 0:
            raise ValueError(f"need n > n_a > 0, got n={self.n}, n_a={self.n_a}")
        if self.L <= 0:
            raise ValueError("window thickness must be positive")
        if not 0.0 <= self.visibility <= 1.0:
            raise ValueError("visibility must lie in [0, 1]")

    @property
    def gamma(self) -> float:
        """Single-surface Fresnel amplitude coefficient at normal incidence."""
        return (self.n - self.n_a) / (self.n + self.n_a)

    @property
    def optical_thickness(self) -> float:
        return self.n * self.L


def _check_wavelength(lam):
    lam = np.asarray(lam, dtype=float)
    if np.any(lam <= 0):
        raise ValueError("wavelength must be positive")
    return lam


def round_trip_phase(lam, params: EtalonParams):
    """phi = 4 pi n L / lambda, shared by both reflectance evaluations."""
    return 4 * np.pi * params.n * params.L / _check_wavelength(lam)


def etalon_amplitude(lam, params: EtalonParams):
    """Complex reflection amplitude of the window, vectorised over ``lam``."""
    g = params.gamma
    phase = np.exp(-1j * round_trip_phase(lam, params))
    return g * (1 - phase) / (1 - g**2 * phase)


def reflectance_closed_form(lam, params: EtalonParams):
    """|Gamma|^2 in real arithmetic; independent of :func:`etalon_amplitude`."""
    g2 = params.gamma**2
    cos_phi = np.cos(round_trip_phase(lam, params))
    return g2 * (2 - 2 * cos_phi) / (1 - 2 * g2 * cos_phi + g2**2)


def window_transmittance(lam, params: EtalonParams):
    """1 - V*|Gamma|^2; equals 1 on resonance (2nL = m*lambda)."""
    return 1.0 - params.visibility * np.abs(etalon_amplitude(lam, params)) ** 2


def generalized_efficiency(eta_base, lam, params: EtalonParams):
    eta_base = np.asarray(eta_base, dtype=float)
    if np.any((eta_base < 0) | (eta_base > 1)):
        raise ValueError("base efficiency must lie in [0, 1]")
    return eta_base * window_transmittance(lam, params)


def free_spectral_range(lam, params: EtalonParams):
    """Wavelength spacing of adjacent transmittance maxima, lambda^2 / (2 n L)."""
    lam = _check_wavelength(lam)
    return lam**2 / (2 * params.n * params.L)


def max_reflectance(n: float, n_a: float = AIR_INDEX) -> float:
    """Peak |Gamma|^2, reached at antiresonance: (2g / (1 + g^2))^2."""
    g = (n - n_a) / (n + n_a)
    return (2 * g / (1 + g**2)) ** 2


def visibility_for_swing(swing: float, n: float, n_a: float = AIR_INDEX) -> float:
    """Visibility giving a relative peak-to-trough efficiency swing ``swing``.

    With a flat baseline the swing is V*max|Gamma|^2 (the peak transmittance is 1).
    """
    v = swing / max_reflectance(n, n_a)
    if not 0 <= v <= 1:
        raise ValueError(f"a {swing:.3%} swing is not reachable with n={n}")
    return v
