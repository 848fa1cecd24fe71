"""Spectroscopic scan series and the three saturation/lineshape fits.

* detuning scans: step-weighted Lorentzian ``A / (1 + 4 d^2 / gamma_L^2)``
  for d < 0, exactly zero for d >= 0 (the ion heats and vanishes on the
  blue side);
* intensity scans: ``C_max / (1 + I / I_sat_fit)``;
* power scans: ``P_max * x / (1 + x)`` with ``x = P_in / P_sat``, fitted as
  ``(P_max_fit, slope)`` where ``slope = P_max_fit / P_sat`` is the
  low-intensity diverted fraction, bounded to (0, 1].

All fits are weighted by the per-point sigma and report absolute-sigma
covariances.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .lsq import FitResult, Model, least_squares

KINDS = {
    "detuning-scan": "MHz",
    "intensity-scan": "W/m^2",
    "power-scan": "W",
}
NON_DETECTION = "non-detection"
FIT_FAILED = "fit-failed"


class InsufficientData(ValueError):
    pass


@dataclass
class ScanSeries:
    kind: str
    controls: np.ndarray
    values: np.ndarray
    sigmas: np.ndarray
    flags: list[list[str]] = field(default_factory=list)
    frames: list = field(default_factory=list)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown scan kind {self.kind!r}; expected one of {sorted(KINDS)}")
        self.controls = np.asarray(self.controls, dtype=float)
        self.values = np.asarray(self.values, dtype=float)
        self.sigmas = np.asarray(self.sigmas, dtype=float)
        n = self.controls.size
        if not (self.values.size == self.sigmas.size == n):
            raise ValueError("controls, values and sigmas must have equal length")
        if not self.flags:
            self.flags = [[] for _ in range(n)]
        if len(self.flags) != n:
            raise ValueError("flags must have one entry per point")
        if np.any(~(self.sigmas > 0)):
            raise ValueError("every sigma must be > 0")
        if n > 1:
            d = np.diff(self.controls)
            if not (np.all(d > 0) or np.all(d < 0)):
                raise ValueError("controls must be strictly monotone")

    @property
    def unit(self) -> str:
        return KINDS[self.kind]

    def __len__(self):
        return self.controls.size

    def usable(self) -> np.ndarray:
        """Boolean mask of points that enter a fit."""
        return np.array([FIT_FAILED not in f for f in self.flags], dtype=bool)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["control", "value", "sigma", "flags"])
            for c, v, s, f in zip(self.controls, self.values, self.sigmas, self.flags):
                w.writerow([repr(float(c)), repr(float(v)), repr(float(s)), ";".join(f)])

    @classmethod
    def from_csv(cls, path, kind: str) -> "ScanSeries":
        controls, values, sigmas, flags = [], [], [], []
        with open(path, newline="", encoding="utf-8") as fh:
            for row in csv.DictReader(fh):
                controls.append(float(row["control"]))
                values.append(float(row["value"]))
                sigmas.append(float(row["sigma"]))
                flags.append([f for f in (row.get("flags") or "").split(";") if f])
        return cls(kind, controls, values, sigmas, flags)


# -- models -----------------------------------------------------------------


def _lineshape(x, p):
    a, g = p
    x = np.asarray(x, dtype=float)
    return np.where(x < 0, a / (1.0 + 4.0 * x * x / (g * g)), 0.0)


def _lineshape_jac(x, p):
    a, g = p
    x = np.asarray(x, dtype=float)
    red = x < 0
    den = 1.0 + 4.0 * x * x / (g * g)
    da = np.where(red, 1.0 / den, 0.0)
    dg = np.where(red, a * 8.0 * x * x / (g**3 * den**2), 0.0)
    return np.column_stack([da, dg])


def _contrast_sat(x, p):
    c, isat = p
    return c / (1.0 + np.asarray(x, dtype=float) / isat)


def _contrast_sat_jac(x, p):
    c, isat = p
    x = np.asarray(x, dtype=float)
    den = 1.0 + x / isat
    return np.column_stack([1.0 / den, c * x / (isat * isat * den * den)])


def _power_sat(x, p):
    pmax, slope = p
    x = np.asarray(x, dtype=float)
    return slope * x / (1.0 + slope * x / pmax)


def _power_sat_jac(x, p):
    pmax, slope = p
    x = np.asarray(x, dtype=float)
    q = slope * x / pmax
    den = (1.0 + q) ** 2
    return np.column_stack([slope * x * q / (pmax * den), x / den])


LINESHAPE = Model(_lineshape, ("A", "gamma_L"), _lineshape_jac)
CONTRAST_SATURATION = Model(_contrast_sat, ("C_max", "I_sat_fit"), _contrast_sat_jac)
POWER_SATURATION = Model(_power_sat, ("P_max_fit", "slope"), _power_sat_jac)
MODELS = {
    "detuning-scan": LINESHAPE,
    "intensity-scan": CONTRAST_SATURATION,
    "power-scan": POWER_SATURATION,
}


# -- initialization -----------------------------------------------------------


def _half_crossing(x, y, level):
    """Control value where ``y`` (sorted by distance from its max) first drops below ``level``."""
    order = np.argsort(x)
    x, y = x[order], y[order]
    k = int(np.argmax(y))
    for step in (1, -1):
        j = k
        while 0 <= j + step < x.size:
            if y[j + step] < level:
                x0, x1, y0, y1 = x[j], x[j + step], y[j], y[j + step]
                return x0 + (level - y0) * (x1 - x0) / (y1 - y0)
            j += step
    return None


def _points(series: ScanSeries, kind: str):
    if series.kind != kind:
        raise ValueError(f"expected a {kind}, got {series.kind}")
    ok = series.usable()
    return series.controls[ok], series.values[ok], series.sigmas[ok]


def _check_dof(x, n_params=2):
    if x.size - n_params < 1:
        raise InsufficientData("need at least one degree of freedom")


def fit_lineshape(series: ScanSeries) -> FitResult:
    """Step-weighted Lorentzian fit; ``gamma_L`` is the FWHM in MHz."""
    x, y, s = _points(series, "detuning-scan")
    red = x < 0
    if red.sum() < 4:
        raise InsufficientData(f"need >= 4 red-detuned points, got {int(red.sum())}")
    xr, yr = x[red], y[red]
    a0 = float(np.max(yr))
    if a0 <= 0:
        a0 = float(np.max(np.abs(yr))) or 1e-3
    cross = _half_crossing(xr, yr, 0.5 * a0)
    g0 = 2.0 * abs(cross) if cross is not None and cross != 0 else 2.0 * float(np.max(np.abs(xr)))
    res = least_squares(LINESHAPE, x, y, s, [a0, g0], bounds=([-np.inf, 1e-9], [np.inf, np.inf]))
    res.params["gamma_L"] = abs(res.params["gamma_L"])
    return res


def fit_contrast_saturation(series: ScanSeries) -> FitResult:
    x, y, s = _points(series, "intensity-scan")
    if x.size < 4:
        raise InsufficientData(f"need >= 4 points, got {x.size}")
    _check_dof(x)
    c0 = float(np.max(y))
    cross = _half_crossing(x, y, 0.5 * c0)
    i0 = cross if cross is not None and cross > 0 else math.sqrt(float(x.min() * x.max()))
    res = least_squares(CONTRAST_SATURATION, x, y, s, [c0, i0], bounds=([-np.inf, 1e-12], [np.inf, np.inf]))
    if x.max() < 5.0 * x.min():
        res.converged = False
        res.message = "insufficient dynamic range: intensities span less than a factor 5"
    return res


def fit_power_saturation(series: ScanSeries) -> FitResult:
    """Saturation fit of absorbed vs incident power; bounds the slope to (0, 1]."""
    x, y, s = _points(series, "power-scan")
    if x.size < 4:
        raise InsufficientData(f"need >= 4 points, got {x.size}")
    _check_dof(x)
    p0 = float(np.max(y))
    cross = _half_crossing(x, y, 0.5 * p0)
    psat0 = cross if cross is not None and cross > 0 else float(np.median(x))
    slope0 = min(p0 / psat0, 1.0) if p0 > 0 else 0.5
    res = least_squares(
        POWER_SATURATION, x, y, s, [p0, slope0], bounds=([1e-300, 1e-9], [np.inf, 1.0])
    )
    pmax, slope = res.params["P_max_fit"], res.params["slope"]
    psat = pmax / slope
    grad = np.array([1.0 / slope, -pmax / slope**2])
    cov = np.asarray(res.covariance)
    res.derived["P_sat"] = psat
    res.derived["P_sat_err"] = float(math.sqrt(max(grad @ cov @ grad, 0.0))) if np.all(np.isfinite(cov)) else math.nan
    anchors = int(np.sum(x < psat / 2))
    res.derived["low_power_anchors"] = anchors
    if anchors < 2 and res.converged:
        res.converged = False
        res.message = f"only {anchors} points below P_sat/2; low-intensity slope not anchored"
    return res


FITTERS = {
    "detuning-scan": fit_lineshape,
    "intensity-scan": fit_contrast_saturation,
    "power-scan": fit_power_saturation,
}


def fit_series(series: ScanSeries) -> FitResult:
    return FITTERS[series.kind](series)
