"""Zero-flux extrapolation and etalon wavelength-sweep fitting.

The zero-flux fit is a weighted straight line of efficiency against the
background-subtracted count rate.  Weights use only the run-level
(statistical) part of each point's uncertainty; the scale uncertainty shared
by every point is added to the intercept afterwards, otherwise it would be
counted once per point.

The sweep fit is a small Levenberg-Marquardt solver over
(n*L, visibility, baseline intercept, baseline slope), started from a
periodogram estimate of the fringe frequency and a scan over the
nearly-degenerate interference orders around it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.signal import lombscargle

from .etalon import AIR_INDEX, FUSED_QUARTZ_INDEX
from .measurement import EfficiencyPoint
from .quantities import Quantity


class FitError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# Weighted straight line
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class LineFit:
    intercept: float
    slope: float
    covariance: np.ndarray
    chi2: float
    dof: int


def weighted_line_fit(x, y, weights=None) -> LineFit:
    """Weighted least-squares line ``y = intercept + slope*x``.

    Computed about the weighted mean of ``x`` so that large abscissae (count
    rates ~1e6) do not cost precision.  ``covariance`` is the parameter
    covariance implied by the weights (not rescaled by chi2).
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    w = np.ones_like(x) if weights is None else np.asarray(weights, dtype=float)
    if x.size < 2 or x.size != y.size or w.size != x.size:
        raise ValueError("need at least two (x, y, w) triples of equal length")
    if np.any(w <= 0) or not np.all(np.isfinite(w)):
        raise ValueError("weights must be positive and finite")
    sw = w.sum()
    xm = (w * x).sum() / sw
    ym = (w * y).sum() / sw
    dx = x - xm
    sxx = (w * dx * dx).sum()
    if sxx <= 0 or np.all(x == x[0]):
        raise FitError("all abscissae are equal; the line is undetermined")
    slope = (w * dx * (y - ym)).sum() / sxx
    intercept = ym - slope * xm
    cov = np.array(
        [[1.0 / sw + xm * xm / sxx, -xm / sxx], [-xm / sxx, 1.0 / sxx]]
    )
    resid = y - intercept - slope * x
    return LineFit(float(intercept), float(slope), cov, float((w * resid**2).sum()), x.size - 2)


# ---------------------------------------------------------------------------
# Zero-flux extrapolation
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class ZeroFluxFit:
    """Intercept and slope of efficiency against count rate.

    ``rate_coefficient`` is minus the fitted slope (s).  For a non-paralyzable
    detector the efficiency falls as eta0*(1 - R*D) exactly, so the physical
    dead time is ``rate_coefficient / eta0``, reported as ``dead_time``.
    """

    eta0: Quantity
    dead_time: Quantity
    rate_coefficient: Quantity
    covariance: np.ndarray
    chi2: float
    dof: int
    eta0_stat: float = 0.0
    rel_u_sys: float = 0.0
    flagged: bool = False

    def predict(self, rate):
        return self.eta0.value - self.rate_coefficient.value * np.asarray(rate, dtype=float)


MIN_RATE_SPAN = 10.0
# Uncertainties below this fraction of the value are round-off: fit unweighted.
NEGLIGIBLE_U = 1e-12


def fit_zero_flux(points: Sequence[EfficiencyPoint], rel_u_sys: float | None = None) -> ZeroFluxFit:
    """Extrapolate efficiency to zero count rate.

    Weights are 1/u_stat^2.  When every point has zero statistical
    uncertainty (noiseless data) the fit is unweighted.  ``rel_u_sys``
    defaults to the mean shared relative uncertainty carried by the points.
    """
    if len(points) < 3:
        raise ValueError("zero-flux fit needs at least 3 points")
    rate = np.array([p.rate for p in points], dtype=float)
    eta = np.array([p.eta.value for p in points], dtype=float)
    u = np.array([p.u_stat for p in points], dtype=float)
    if np.all(rate == rate[0]):
        raise FitError("all count rates are equal; the slope is undetermined")
    if rate.min() > 0 and rate.max() / rate.min() < MIN_RATE_SPAN:
        raise ValueError("count rates must span at least a factor of 10")
    if np.all(u <= NEGLIGIBLE_U * np.abs(eta)):
        weights = None
    elif np.any(u <= 0):
        raise ValueError("statistical uncertainties must be all positive or all zero")
    else:
        weights = 1.0 / u**2

    line = weighted_line_fit(rate, eta, weights)
    cov = line.covariance if weights is not None else np.zeros((2, 2))
    a, b = line.intercept, line.slope
    if rel_u_sys is None:
        rel_u_sys = float(np.mean([p.rel_u_sys for p in points]))

    u_a_stat = math.sqrt(cov[0, 0])
    eta0 = Quantity(a, math.hypot(u_a_stat, a * rel_u_sys), "1")
    # D = -b/a; the shared scale cancels in the ratio.
    grad = np.array([b / a**2, -1.0 / a])
    u_dead = math.sqrt(max(float(grad @ cov @ grad), 0.0))
    coeff_u = math.hypot(math.sqrt(cov[1, 1]), b * rel_u_sys)
    return ZeroFluxFit(
        eta0=eta0,
        dead_time=Quantity(-b / a, u_dead, "s"),
        rate_coefficient=Quantity(-b, coeff_u, "s"),
        covariance=cov,
        chi2=line.chi2,
        dof=line.dof,
        eta0_stat=u_a_stat,
        rel_u_sys=rel_u_sys,
        flagged=b > 0,
    )


# ---------------------------------------------------------------------------
# Etalon sweep
# ---------------------------------------------------------------------------
@dataclass
class SweepFit:
    """Fitted window model  eta(lam) = (a + b*(lam - lam_ref)) * (1 - V*|Gamma|^2)."""

    optical_thickness: Quantity
    thickness: Quantity
    visibility: Quantity
    baseline_intercept: Quantity
    baseline_slope: Quantity
    lambda_ref: float
    n: float
    n_a: float
    ambiguity_class: int
    alias_delta_chi2: float
    residual_chi2: float
    dof: int
    iterations: int = 0
    flagged: bool = False
    covariance: np.ndarray = field(default_factory=lambda: np.zeros((4, 4)))

    def model(self, lam):
        lam = np.asarray(lam, dtype=float)
        return _sweep_model(
            np.array(
                [
                    self.optical_thickness.value,
                    self.visibility.value,
                    self.baseline_intercept.value,
                    self.baseline_slope.value,
                ]
            ),
            lam,
            lam - self.lambda_ref,
            _gamma(self.n, self.n_a),
        )

    @property
    def free_spectral_range(self) -> float:
        return self.lambda_ref**2 / (2 * self.optical_thickness.value)

    def peak_to_trough(self, lam_lo: float, lam_hi: float, n_grid: int = 20001) -> float:
        """Relative swing (max - min)/max of the fitted model over a wavelength span."""
        m = self.model(np.linspace(lam_lo, lam_hi, n_grid))
        return float((m.max() - m.min()) / m.max())


def _gamma(n: float, n_a: float) -> float:
    return (n - n_a) / (n + n_a)


def _reflectance(nl, lam, g):
    g2 = g * g
    c = np.cos(4 * np.pi * nl / lam)
    return g2 * (2 - 2 * c) / (1 - 2 * g2 * c + g2 * g2)


def _sweep_model(p, lam, x, g):
    nl, v, a, b = p
    return (a + b * x) * (1 - v * _reflectance(nl, lam, g))


def _sweep_jacobian(p, lam, x, g):
    nl, v, a, b = p
    g2 = g * g
    phi = 4 * np.pi * nl / lam
    c, s = np.cos(phi), np.sin(phi)
    den = 1 - 2 * g2 * c + g2 * g2
    refl = g2 * (2 - 2 * c) / den
    drefl_dphi = 2 * g2 * s * (1 - g2) ** 2 / den**2
    base = a + b * x
    trans = 1 - v * refl
    return np.column_stack(
        [-base * v * drefl_dphi * 4 * np.pi / lam, -base * refl, trans, x * trans]
    )


def levenberg_marquardt(
    p0,
    lam,
    x,
    y,
    w,
    g,
    max_iter: int = 200,
    rtol: float = 1e-9,
):
    """Damped Gauss-Newton on the sweep model; visibility is clipped to [0, 1].

    Returns (params, chi2, iterations).  Converged when an accepted step
    changes chi2 by less than ``rtol`` relative.
    """
    p = np.asarray(p0, dtype=float).copy()
    sw = np.sqrt(w)
    r = (y - _sweep_model(p, lam, x, g)) * sw
    chi2 = float(r @ r)
    damping = 1e-3
    for it in range(1, max_iter + 1):
        if chi2 == 0.0:
            return p, chi2, it - 1
        J = _sweep_jacobian(p, lam, x, g) * sw[:, None]
        jtj = J.T @ J
        grad = J.T @ r
        diag = np.diag(jtj).copy()
        diag[diag == 0] = 1.0
        while True:
            try:
                step = np.linalg.solve(jtj + damping * np.diag(diag), grad)
            except np.linalg.LinAlgError:
                step = np.linalg.lstsq(jtj + damping * np.diag(diag), grad, rcond=None)[0]
            trial = p + step
            trial[1] = min(max(trial[1], 0.0), 1.0)
            r_new = (y - _sweep_model(trial, lam, x, g)) * sw
            chi2_new = float(r_new @ r_new)
            if chi2_new <= chi2:
                damping = max(damping / 10, 1e-12)
                break
            damping *= 10
            if damping > 1e12:
                # No descent direction left: at a minimum to working precision.
                return p, chi2, it
        delta = chi2 - chi2_new
        p, r, chi2_old, chi2 = trial, r_new, chi2, chi2_new
        if delta <= rtol * max(chi2_old, np.finfo(float).tiny):
            return p, chi2, it
    raise FitError(f"sweep fit did not converge in {max_iter} iterations")


def _linear_coefficients(refl, x, y, w):
    """Best (a, b, V) for fixed reflectance curves via a 4-term linear fit.

    Batched over the leading axis of ``refl``; returns (coef, chi2) arrays.
    """
    # Normal equations from moment sums; basis is (1, x, R, x*R).
    m = refl.shape[0]
    wx, wxx = w * x, w * x * x
    r1 = refl @ np.stack([w, wx, wxx, w * y, wx * y], axis=1)  # (m, 5)
    r2 = (refl * refl) @ np.stack([w, wx, wxx], axis=1)  # (m, 3)
    s0, s1, s2 = w.sum(), wx.sum(), wxx.sum()
    ata = np.empty((m, 4, 4))
    ata[:, 0, 0], ata[:, 0, 1], ata[:, 1, 1] = s0, s1, s2
    ata[:, 0, 2], ata[:, 0, 3] = r1[:, 0], r1[:, 1]
    ata[:, 1, 2], ata[:, 1, 3] = r1[:, 1], r1[:, 2]
    ata[:, 2, 2], ata[:, 2, 3], ata[:, 3, 3] = r2[:, 0], r2[:, 1], r2[:, 2]
    iu = np.triu_indices(4, 1)
    ata[:, iu[1], iu[0]] = ata[:, iu[0], iu[1]]
    aty = np.empty((m, 4))
    aty[:, 0], aty[:, 1] = (w * y).sum(), (wx * y).sum()
    aty[:, 2], aty[:, 3] = r1[:, 3], r1[:, 4]
    coef = np.linalg.solve(ata, aty[..., None])[..., 0]
    chi2 = (w * y * y).sum() - np.einsum("mk,mk->m", coef, aty)
    return coef, chi2


FRINGE_DETECTION_DCHI2 = 25.0


def fit_etalon_sweep(
    lam: Sequence[float],
    eta: Sequence[float],
    u_eta: Sequence[float] | None = None,
    n: float = FUSED_QUARTZ_INDEX,
    n_a: float = AIR_INDEX,
    L_guess: float | None = None,
    max_iter: int = 200,
) -> SweepFit:
    """Fit window-fringe model to efficiency vs wavelength.

    ``eta`` may be a list of :class:`Quantity` (then ``u_eta`` is taken from
    it) or plain floats with ``u_eta`` given.  ``n`` is held fixed; only n*L
    is identifiable.  Data with no detectable fringe give a flagged
    baseline-only fit with V=0.
    """
    lam = np.asarray(lam, dtype=float)
    if u_eta is None:
        if not all(isinstance(e, Quantity) for e in eta):
            raise ValueError("uncertainties are required")
        u = np.array([e.u for e in eta], dtype=float)
        y = np.array([e.value for e in eta], dtype=float)
    else:
        y = np.array([e.value if isinstance(e, Quantity) else e for e in eta], dtype=float)
        u = np.asarray(u_eta, dtype=float)
    if lam.size < 8 or y.size != lam.size or u.size != lam.size:
        raise ValueError("sweep fit needs at least 8 points with matching uncertainties")
    if np.any(np.diff(lam) <= 0):
        raise ValueError("wavelengths must be strictly increasing")
    if np.any(u < 0):
        raise ValueError("uncertainties must be non-negative")
    if np.any(u <= NEGLIGIBLE_U * np.abs(y)):
        u = np.zeros_like(y)
    w = 1.0 / u**2 if np.all(u > 0) else np.ones_like(y)
    g = _gamma(n, n_a)

    lam_ref = float((w * lam).sum() / w.sum())
    x = lam - lam_ref
    line = weighted_line_fit(x, y, w)
    chi2_base = line.chi2

    k = 1.0 / lam
    span_k = k.max() - k.min()
    resolution = 2 * np.pi / span_k  # rad per unit of 1/lambda
    if L_guess is not None:
        centre = 4 * np.pi * n * L_guess
        w_lo, w_hi = 0.5 * centre, 2.0 * centre
    else:
        w_lo, w_hi = resolution, np.pi / np.median(np.abs(np.diff(k)))
    if w_hi <= w_lo:
        raise ValueError("wavelength sampling cannot resolve a fringe in the search range")
    omegas = np.arange(w_lo, w_hi, resolution / 5)
    resid = y - line.intercept - line.slope * x
    power = lombscargle(k, resid, omegas, precenter=True)
    omega0 = omegas[int(np.argmax(power))]

    # Interference orders near the periodogram peak are almost degenerate;
    # scan them at phase steps of pi/8 and keep the best linear fit.
    nl0 = omega0 / (4 * np.pi)
    half_width = resolution / (4 * np.pi)
    step = lam_ref / 32
    candidates = np.arange(max(nl0 - half_width, step), nl0 + half_width, step)
    best = None
    for chunk in np.array_split(candidates, max(1, candidates.size // 2000)):
        refl = _reflectance(chunk[:, None], lam[None, :], g)
        coef, chi2 = _linear_coefficients(refl, x, y, w)
        i = int(np.argmin(chi2))
        if best is None or chi2[i] < best[1]:
            best = (chunk[i], chi2[i], coef[i])
    nl_init, _, (a0, b0, c0, _) = best
    v_init = min(max(-c0 / a0, 0.0), 1.0) if a0 != 0 else 0.0
    p, chi2, iters = levenberg_marquardt(
        [nl_init, v_init, a0, b0], lam, x, y, w, g, max_iter=max_iter
    )

    # Refit the neighbouring orders; adopt one if it is better.
    alias = []
    for shift in (-0.5, 0.5):
        try:
            pa, ca, _ = levenberg_marquardt(
                [p[0] + shift * lam_ref, p[1], p[2], p[3]], lam, x, y, w, g, max_iter=max_iter
            )
        except FitError:
            continue
        alias.append((ca, pa))
    for ca, pa in alias:
        if ca < chi2 and abs(pa[0] - p[0]) > lam_ref / 4:
            p, chi2 = pa, ca
    alias_delta = min((ca - chi2 for ca, pa in alias if abs(pa[0] - p[0]) > lam_ref / 4),
                      default=float("nan"))

    dof = lam.size - 4
    if np.all(u > 0):
        no_fringe = chi2_base - chi2 < FRINGE_DETECTION_DCHI2
    else:
        # Unweighted: chi2 has no absolute scale, so require a clear reduction.
        no_fringe = chi2_base == 0 or chi2 > 0.25 * chi2_base
    if no_fringe or p[1] <= 0:
        cov_line = line.covariance
        return SweepFit(
            optical_thickness=Quantity(p[0], 0.0, "m"),
            thickness=Quantity(p[0] / n, 0.0, "m"),
            visibility=Quantity(0.0, 0.0, "1"),
            baseline_intercept=Quantity(line.intercept, math.sqrt(cov_line[0, 0]), "1"),
            baseline_slope=Quantity(line.slope, math.sqrt(cov_line[1, 1]), "1/m"),
            lambda_ref=lam_ref,
            n=n,
            n_a=n_a,
            ambiguity_class=0,
            alias_delta_chi2=float("nan"),
            residual_chi2=chi2_base,
            dof=lam.size - 2,
            iterations=iters,
            flagged=True,
        )

    J = _sweep_jacobian(p, lam, x, g) * np.sqrt(w)[:, None]
    try:
        cov = np.linalg.inv(J.T @ J)
    except np.linalg.LinAlgError:
        cov = np.linalg.pinv(J.T @ J)
    if not np.all(u > 0):
        cov = cov * (chi2 / dof if dof > 0 else 0.0)
    err = np.sqrt(np.clip(np.diag(cov), 0, None))
    return SweepFit(
        optical_thickness=Quantity(p[0], err[0], "m"),
        thickness=Quantity(p[0] / n, err[0] / n, "m"),
        visibility=Quantity(p[1], err[1], "1"),
        baseline_intercept=Quantity(p[2], err[2], "1"),
        baseline_slope=Quantity(p[3], err[3], "1/m"),
        lambda_ref=lam_ref,
        n=n,
        n_a=n_a,
        ambiguity_class=int(round(2 * p[0] / lam_ref)),
        alias_delta_chi2=float(alias_delta),
        residual_chi2=chi2,
        dof=dof,
        iterations=iters,
        flagged=False,
        covariance=cov,
    )
