"""Two-level atom photophysics.

Scattering rate of an ideal two-level scatterer and the radiometric
quantities derived from it (saturation intensity, resonant cross section,
maximum absorbable power). Detunings and linewidths are angular (rad/s)
everywhere in this module; conversion from MHz happens at the CLI boundary
via :func:`mhz_to_angular`.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class PhysicalConstants:
    """CODATA 2018 exact/recommended values (SI)."""

    h: float = 6.62607015e-34
    c: float = 299792458.0
    kB: float = 1.380649e-23
    amu: float = 1.66053906660e-27

    @property
    def hbar(self) -> float:
        return self.h / (2.0 * math.pi)


CONSTANTS = PhysicalConstants()


class NoCoolingEquilibrium(ValueError):
    """Raised when the laser is not red-detuned, so no Doppler equilibrium exists."""


@dataclass(frozen=True)
class TransitionParams:
    """Atomic transition.

    Attributes:
        wavelength: transition wavelength (m).
        lifetime: excited-state lifetime (s).
        kappa_pol: polarization / level-structure reduction of the
            cross section, in (0, 1].
    """

    wavelength: float = 369.5e-9
    lifetime: float = 8.1e-9
    kappa_pol: float = 0.5

    def __post_init__(self):
        if not (math.isfinite(self.wavelength) and self.wavelength > 0):
            raise ValueError(f"wavelength must be positive, got {self.wavelength}")
        if not (math.isfinite(self.lifetime) and self.lifetime > 0):
            raise ValueError(f"lifetime must be positive, got {self.lifetime}")
        if not (0 < self.kappa_pol <= 1):
            raise ValueError(f"kappa_pol must be in (0, 1], got {self.kappa_pol}")

    @property
    def gamma(self) -> float:
        """Natural linewidth, angular (rad/s)."""
        return 1.0 / self.lifetime

    @property
    def linewidth_hz(self) -> float:
        """Natural linewidth FWHM in ordinary frequency (Hz)."""
        return 1.0 / (2.0 * math.pi * self.lifetime)

    @property
    def photon_energy(self) -> float:
        return CONSTANTS.h * CONSTANTS.c / self.wavelength


YB174 = TransitionParams()
YB174_MASS = 174 * CONSTANTS.amu


@dataclass(frozen=True)
class LaserParams:
    """Illumination at the atom: angular detuning (rad/s) and intensity (W/m^2)."""

    detuning: float = -2 * math.pi * 8e6
    intensity: float = 570.0

    def __post_init__(self):
        if not math.isfinite(self.detuning):
            raise ValueError("detuning must be finite")
        if not (math.isfinite(self.intensity) and self.intensity >= 0):
            raise ValueError(f"intensity must be >= 0, got {self.intensity}")

    def s0(self, t: TransitionParams) -> float:
        return self.intensity / saturation_intensity(t)


def _unwrap(x):
    return float(x) if np.ndim(x) == 0 else x


def mhz_to_angular(f_mhz):
    """Ordinary-frequency detuning in MHz to angular detuning in rad/s."""
    return _unwrap(2.0 * math.pi * 1e6 * np.asarray(f_mhz, dtype=float))


def angular_to_mhz(delta):
    return _unwrap(np.asarray(delta, dtype=float) / (2.0 * math.pi * 1e6))


def _check_rate_inputs(s0, delta):
    s0 = np.asarray(s0, dtype=float)
    delta = np.asarray(delta, dtype=float)
    if not (np.all(np.isfinite(s0)) and np.all(np.isfinite(delta))):
        raise ValueError("s0 and delta must be finite")
    if np.any(s0 < 0):
        raise ValueError("s0 must be non-negative")
    return s0, delta


def scattering_rate(t: TransitionParams, s0, delta):
    """Photon scattering rate (1/s) of the two-level atom.

    ``(Gamma/2) * s0 / (1 + s0 + 4 delta^2 / Gamma^2)``. Accepts scalars or
    arrays for ``s0`` and ``delta``.
    """
    s0, delta = _check_rate_inputs(s0, delta)
    g = t.gamma
    return _unwrap(0.5 * g * s0 / (1.0 + s0 + 4.0 * delta**2 / g**2))


def scattered_power(t: TransitionParams, s0, delta):
    """Optical power (W) removed from the beam: rate times photon energy."""
    return _unwrap(np.asarray(scattering_rate(t, s0, delta)) * t.photon_energy)


def saturation_intensity(t: TransitionParams) -> float:
    return math.pi * CONSTANTS.h * CONSTANTS.c / (3.0 * t.wavelength**3 * t.lifetime)


def resonant_cross_section(t: TransitionParams) -> float:
    return 3.0 * t.wavelength**2 / (2.0 * math.pi)


def max_absorbed_power(t: TransitionParams) -> float:
    return CONSTANTS.h * CONSTANTS.c / (2.0 * t.wavelength * t.lifetime)


def effective_cross_section(t: TransitionParams, laser: LaserParams) -> float:
    """Cross section (m^2) that removes the scattered power from the incident intensity.

    Includes the ``kappa_pol`` reduction. Its ratio to the resonant cross
    section is the fraction of power incident on that cross section which the
    atom diverts.
    """
    if laser.intensity <= 0:
        raise ValueError("effective cross section undefined at zero intensity")
    p = scattered_power(t, laser.s0(t), laser.detuning)
    return t.kappa_pol * p / laser.intensity


def low_intensity_fraction(t: TransitionParams, delta: float) -> float:
    """Limit of effective/resonant cross section as s0 -> 0."""
    return t.kappa_pol / (1.0 + 4.0 * delta**2 / t.gamma**2)


def doppler_temperature(t: TransitionParams, delta: float, s0: float = 0.0) -> float:
    """Doppler-cooling equilibrium temperature (K), textbook 1D two-level result.

    Raises:
        NoCoolingEquilibrium: for ``delta >= 0``.
    """
    if delta >= 0:
        raise NoCoolingEquilibrium(f"no cooling equilibrium at detuning {delta} rad/s (must be < 0)")
    if s0 < 0:
        raise ValueError("s0 must be non-negative")
    g = t.gamma
    x = 2.0 * abs(delta) / g
    return CONSTANTS.hbar * g / (4.0 * CONSTANTS.kB) * (1.0 + s0 + x**2) / x
