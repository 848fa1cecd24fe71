"""Flat run configuration in reporting units, with key=value files and unit suffixes.

Every quantity is stored in the unit people quote it in (nm, ns, MHz, W/m^2,
nW, s) and converted to SI only when a :class:`~shadowcast.imaging.Scene`
is built. Values in files or on the command line may carry an explicit unit
suffix (``8.1ns``, ``4.8um``, ``15nW``) which is converted to the key's unit.
"""
from __future__ import annotations

import dataclasses
import json
import math
import os
import re
from dataclasses import dataclass, fields
from pathlib import Path

from .imaging import (
    KAPPA_CAL,
    BeamProfile,
    CameraModel,
    Etalon,
    ImagingSystem,
    IonSpotModel,
    Scene,
    predict_peak_contrast,
)
from .photophysics import LaserParams, TransitionParams, mhz_to_angular

SEED_ENV = "SHADOWCAST_SEED"
DEFAULT_SEED = 0


class ConfigError(ValueError):
    pass


# unit -> SI factor, grouped by dimension
_UNITS = {
    "length": {"m": 1.0, "mm": 1e-3, "um": 1e-6, "µm": 1e-6, "nm": 1e-9, "pm": 1e-12},
    "time": {"s": 1.0, "ms": 1e-3, "us": 1e-6, "µs": 1e-6, "ns": 1e-9},
    "frequency": {"Hz": 1.0, "kHz": 1e3, "MHz": 1e6, "GHz": 1e9},
    "power": {"W": 1.0, "mW": 1e-3, "uW": 1e-6, "µW": 1e-6, "nW": 1e-9, "pW": 1e-12},
    "intensity": {"W/m^2": 1.0, "W/m2": 1.0, "mW/cm^2": 10.0, "mW/cm2": 10.0},
}


def _unit(dimension: str, name: str):
    return dimension, name


@dataclass
class RunConfig:
    """All parameters of a run. Field metadata records the boundary unit."""

    # transition and laser
    wavelength: float = dataclasses.field(default=369.5, metadata={"unit": _unit("length", "nm")})
    lifetime: float = dataclasses.field(default=8.1, metadata={"unit": _unit("time", "ns")})
    kappa_pol: float = 0.5
    detuning: float = dataclasses.field(default=-8.0, metadata={"unit": _unit("frequency", "MHz")})
    intensity: float = dataclasses.field(default=570.0, metadata={"unit": _unit("intensity", "W/m^2")})
    # beam; a set beam_power overrides intensity
    beam_power: float | None = dataclasses.field(default=None, metadata={"unit": _unit("power", "nW")})
    beam_fwhm: float = dataclasses.field(default=4800.0, metadata={"unit": _unit("length", "nm")})
    pointing_jitter: float = dataclasses.field(default=0.0, metadata={"unit": _unit("length", "nm")})
    # imaging system
    na: float = 0.64
    magnification: float = 615.0
    psf_fwhm: float = dataclasses.field(default=440.0, metadata={"unit": _unit("length", "nm")})
    transmission: float = 0.06
    etalon_amplitude: float = 0.0
    etalon_period: float = dataclasses.field(default=2000.0, metadata={"unit": _unit("length", "nm")})
    # camera
    pixel_pitch: float = dataclasses.field(default=13000.0, metadata={"unit": _unit("length", "nm")})
    qe: float = 0.35
    read_noise: float = 10.0
    binning: int = 4
    exposure: float = dataclasses.field(default=1.0, metadata={"unit": _unit("time", "s")})
    full_well: float = 2.5e5
    gain: float = 4.0
    bit_depth: int = 16
    width: int = 128
    height: int = 128
    subexposures: int = 1
    # ion; contrast None means the calibrated prediction at the configured laser
    contrast: float | None = None
    spot_fwhm: float = dataclasses.field(default=485.0, metadata={"unit": _unit("length", "nm")})
    ion_x: float = dataclasses.field(default=0.0, metadata={"unit": _unit("length", "nm")})
    ion_y: float = dataclasses.field(default=0.0, metadata={"unit": _unit("length", "nm")})
    # analysis
    r_high: float = 1.0
    r_low: float = 20.0
    floor: float = 100.0
    use_filter: bool = True
    # scan controls, in the series unit of the scan kind
    scan_start: float | None = None
    scan_stop: float | None = None
    scan_num: int | None = None
    scan_log: bool | None = None
    scan_controls: str | None = None
    auto_exposure: bool = True
    # run
    seed: int | None = None
    out: str = "."

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if v is None:
                continue
            kind = _base_type(f)
            try:
                v = _coerce(kind, v, f)
            except ValueError as exc:
                raise ConfigError(f"{f.name}: {exc}") from None
            setattr(self, f.name, v)
        self.validate()

    def validate(self) -> None:
        positive = ("wavelength", "lifetime", "beam_fwhm", "na", "magnification", "psf_fwhm",
                    "pixel_pitch", "exposure", "full_well", "gain", "spot_fwhm", "r_high", "r_low")
        for name in positive:
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be > 0, got {getattr(self, name)}")
        if not 0 < self.kappa_pol <= 1:
            raise ConfigError("kappa_pol must be in (0, 1]")
        if self.intensity < 0:
            raise ConfigError("intensity must be >= 0")
        if self.beam_power is not None and self.beam_power < 0:
            raise ConfigError("beam_power must be >= 0")
        for name in ("transmission", "qe"):
            if not 0 < getattr(self, name) <= 1:
                raise ConfigError(f"{name} must be in (0, 1]")
        if self.contrast is not None and not 0 <= self.contrast <= 1:
            raise ConfigError("contrast must be in [0, 1]")
        if not 0 <= self.etalon_amplitude < 1:
            raise ConfigError("etalon_amplitude must be in [0, 1)")
        if self.subexposures < 1:
            raise ConfigError("subexposures must be >= 1")
        if self.r_low <= self.r_high:
            raise ConfigError("r_low must exceed r_high")
        if self.scan_num is not None and self.scan_num < 1:
            raise ConfigError("scan_num must be >= 1")
        for name in ("detuning", "intensity", "floor", "read_noise"):
            if not math.isfinite(getattr(self, name)):
                raise ConfigError(f"{name} must be finite")

    # -- conversions -----------------------------------------------------------

    def transition(self) -> TransitionParams:
        return TransitionParams(self.wavelength * 1e-9, self.lifetime * 1e-9, self.kappa_pol)

    def beam(self) -> BeamProfile:
        center = (0.0, 0.0)
        jitter = self.pointing_jitter * 1e-9
        if self.beam_power is not None:
            return BeamProfile(self.beam_power * 1e-9, self.beam_fwhm * 1e-9, center, jitter)
        return BeamProfile.from_peak_intensity(
            self.intensity, self.beam_fwhm * 1e-9, center=center, pointing_jitter_rms=jitter
        )

    def laser(self) -> LaserParams:
        """Laser at the ion: intensity follows the beam when its power is set."""
        return LaserParams(detuning=mhz_to_angular(self.detuning), intensity=self.beam().peak_intensity)

    def peak_contrast(self) -> float:
        if self.contrast is not None:
            return self.contrast
        return predict_peak_contrast(self.transition(), self.laser(), self.spot_fwhm * 1e-9, KAPPA_CAL)

    def to_scene(self) -> Scene:
        etalon = None
        if self.etalon_amplitude > 0:
            etalon = Etalon(self.etalon_amplitude, self.etalon_period * 1e-9)
        try:
            return Scene(
                transition=self.transition(),
                beam=self.beam(),
                imaging=ImagingSystem(self.na, self.magnification, self.psf_fwhm * 1e-9, self.transmission, etalon),
                camera=CameraModel(
                    pixel_pitch=self.pixel_pitch * 1e-9,
                    qe=self.qe,
                    read_noise=self.read_noise,
                    binning=self.binning,
                    exposure=self.exposure,
                    full_well=self.full_well,
                    bit_depth=self.bit_depth,
                    gain=self.gain,
                    width=self.width,
                    height=self.height,
                ),
                ion=IonSpotModel(
                    peak_contrast=self.peak_contrast(),
                    fwhm_x=self.spot_fwhm * 1e-9,
                    fwhm_y=self.spot_fwhm * 1e-9,
                    center=(self.ion_x * 1e-9, self.ion_y * 1e-9),
                ),
            )
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def resolved_seed(self) -> int:
        return DEFAULT_SEED if self.seed is None else self.seed

    def echo(self) -> dict:
        """Resolved config for embedding in outputs; ``out`` is a destination, not a parameter."""
        d = dataclasses.asdict(self)
        d.pop("out")
        d["seed"] = self.resolved_seed()
        return d

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)


# -- parsing -------------------------------------------------------------------

_NUMBER = re.compile(r"^\s*([-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?|[-+]?inf|nan)\s*(\S*)\s*$")
_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _base_type(f) -> type:
    t = f.type if isinstance(f.type, str) else getattr(f.type, "__name__", str(f.type))
    for name, kind in (("bool", bool), ("int", int), ("float", float), ("str", str)):
        if t.startswith(name):
            return kind
    raise TypeError(f"unsupported config field type {f.type!r}")


def parse_quantity(text: str, unit=None) -> float:
    """Parse ``"8.1ns"`` style text into the field's unit ``(dimension, name)``."""
    m = _NUMBER.match(str(text))
    if not m:
        raise ValueError(f"not a number: {text!r}")
    value = float(m.group(1))
    suffix = m.group(2)
    if not suffix:
        return value
    if unit is None:
        raise ValueError(f"unexpected unit {suffix!r} on a dimensionless value")
    table = _UNITS[unit[0]]
    if suffix not in table:
        raise ValueError(f"unit {suffix!r} is not a {unit[0]}; use one of {sorted(table)}")
    return value * table[suffix] / table[unit[1]]


def _coerce(kind, value, f):
    if kind is bool:
        if isinstance(value, bool):
            return value
        s = str(value).strip().lower()
        if s in _TRUE:
            return True
        if s in _FALSE:
            return False
        raise ValueError(f"not a boolean: {value!r}")
    if kind is str:
        return str(value)
    if isinstance(value, bool):
        raise ValueError(f"expected a number, got {value!r}")
    if isinstance(value, (int, float)):
        num = float(value)
    else:
        num = parse_quantity(value, f.metadata.get("unit"))
    if kind is int:
        if num != int(num):
            raise ValueError(f"expected an integer, got {value!r}")
        return int(num)
    return num


FIELD_NAMES = tuple(f.name for f in fields(RunConfig))


def read_config_file(path) -> dict:
    """Read a flat ``key = value`` file or a JSON object (a previous run's echo).

    JSON files may hold the config at the top level or under ``"config"``.
    """
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    if path.suffix == ".json":
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: expected a JSON object")
        data = data.get("config", data)
    else:
        data = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key = value")
            key, value = (s.strip() for s in line.split("=", 1))
            data[key.replace("-", "_")] = value
    unknown = sorted(set(data) - set(FIELD_NAMES))
    if unknown:
        raise ConfigError(f"{path}: unknown keys {unknown}")
    return data


def build_config(file_values: dict | None = None, overrides: dict | None = None, env=None) -> RunConfig:
    """Merge defaults, file values and flag overrides (flag wins).

    The seed falls back to ``SHADOWCAST_SEED`` when neither the file nor the
    flags set it.
    """
    env = os.environ if env is None else env
    merged = dict(file_values or {})
    merged.update({k: v for k, v in (overrides or {}).items() if v is not None})
    if merged.get("seed") is None and env.get(SEED_ENV):
        merged["seed"] = env[SEED_ENV]
    unknown = sorted(set(merged) - set(FIELD_NAMES))
    if unknown:
        raise ConfigError(f"unknown config keys {unknown}")
    return RunConfig(**merged)
