"""Forward model of the absorption-imaging camera frames.

A Gaussian illumination beam passes the ion, which removes a PSF-shaped
amount of light centred on its position. The shadow is re-imaged through a
lossy optical train onto a binned CCD with shot noise, read noise and ADC
quantization. Reference frames are the same scene with the ion shelved in the
dark state.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .photophysics import (
    CONSTANTS,
    LaserParams,
    TransitionParams,
    doppler_temperature,
    effective_cross_section,
)

FWHM_PER_SIGMA = math.sqrt(8.0 * math.log(2.0))
SHELVED_SUPPRESSION = 10.0 ** (-4.5)  # 45 dB
ALLOWED_BINNING = (1, 2, 4, 8)
FRAME_KINDS = ("signal", "reference")


class GeometryError(ValueError):
    """Field of view does not contain the ion spot."""


@dataclass(frozen=True)
class BeamProfile:
    """Gaussian illumination beam in the object plane (SI units)."""

    power: float = 15e-9
    fwhm: float = 4.8e-6
    center: tuple[float, float] = (0.0, 0.0)
    pointing_jitter_rms: float = 0.0

    def __post_init__(self):
        if self.power < 0:
            raise ValueError("beam power must be >= 0")
        if self.fwhm <= 0:
            raise ValueError("beam fwhm must be > 0")
        if self.pointing_jitter_rms < 0:
            raise ValueError("pointing jitter must be >= 0")

    @property
    def peak_intensity(self) -> float:
        return self.power * 4.0 * math.log(2.0) / (math.pi * self.fwhm**2)

    @classmethod
    def from_peak_intensity(cls, intensity: float, fwhm: float = 4.8e-6, **kwargs) -> "BeamProfile":
        power = intensity * math.pi * fwhm**2 / (4.0 * math.log(2.0))
        return cls(power=power, fwhm=fwhm, **kwargs)


@dataclass(frozen=True)
class Etalon:
    """Sinusoidal transverse intensity ripple from the interference filter."""

    amplitude: float = 0.02
    period: float = 2e-6
    phase: float = 0.0

    def __post_init__(self):
        if not (0 <= self.amplitude < 1):
            raise ValueError("etalon amplitude must be in [0, 1)")
        if self.period <= 0:
            raise ValueError("etalon period must be > 0")

    def ripple(self, x):
        return 1.0 + self.amplitude * np.sin(2.0 * math.pi * x / self.period + self.phase)


@dataclass(frozen=True)
class ImagingSystem:
    na: float = 0.64
    magnification: float = 615.0
    psf_fwhm: float = 440e-9
    transmission: float = 0.06
    etalon: Etalon | None = None

    def __post_init__(self):
        if not (0 < self.na < 1):
            raise ValueError("numerical aperture must be in (0, 1)")
        if self.magnification <= 0:
            raise ValueError("magnification must be > 0")
        if self.psf_fwhm <= 0:
            raise ValueError("psf_fwhm must be > 0")
        if not (0 < self.transmission <= 1):
            raise ValueError("transmission must be in (0, 1]")

    def check_diffraction(self, wavelength: float) -> None:
        floor = 0.51 * wavelength / self.na - 1e-9
        if self.psf_fwhm < floor:
            raise ValueError(
                f"psf_fwhm {self.psf_fwhm * 1e9:.1f} nm beats the diffraction limit "
                f"{(floor + 1e-9) * 1e9:.1f} nm at NA {self.na}"
            )


@dataclass(frozen=True)
class CameraModel:
    """Binned CCD. ``width``/``height`` are in binned pixels; ``gain`` is e-/ADU."""

    pixel_pitch: float = 13e-6
    qe: float = 0.35
    read_noise: float = 10.0
    binning: int = 4
    exposure: float = 1.0
    full_well: float = 2.5e5
    bit_depth: int = 16
    gain: float = 4.0
    width: int = 128
    height: int = 128

    def __post_init__(self):
        if self.binning not in ALLOWED_BINNING:
            raise ValueError(f"binning must be one of {ALLOWED_BINNING}")
        for name in ("pixel_pitch", "exposure", "full_well", "gain"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be > 0")
        if not (0 < self.qe <= 1):
            raise ValueError("qe must be in (0, 1]")
        if self.read_noise < 0:
            raise ValueError("read_noise must be >= 0")
        if not (1 <= self.bit_depth <= 16):
            raise ValueError("bit_depth must be in 1..16")
        if self.width < 1 or self.height < 1:
            raise ValueError("frame dimensions must be positive")

    @property
    def max_count(self) -> int:
        return 2**self.bit_depth - 1


@dataclass(frozen=True)
class IonSpotModel:
    peak_contrast: float = 0.031
    fwhm_x: float = 485e-9
    fwhm_y: float = 485e-9
    center: tuple[float, float] = (0.0, 0.0)
    shelved: bool = False

    def __post_init__(self):
        if not (0 <= self.peak_contrast <= 1):
            raise ValueError("peak_contrast must be in [0, 1]")
        if self.fwhm_x <= 0 or self.fwhm_y <= 0:
            raise ValueError("spot fwhm must be > 0")

    @property
    def effective_contrast(self) -> float:
        return self.peak_contrast * (SHELVED_SUPPRESSION if self.shelved else 1.0)


@dataclass(frozen=True)
class Scene:
    transition: TransitionParams = field(default_factory=TransitionParams)
    beam: BeamProfile = field(default_factory=BeamProfile)
    imaging: ImagingSystem = field(default_factory=ImagingSystem)
    camera: CameraModel = field(default_factory=CameraModel)
    ion: IonSpotModel = field(default_factory=IonSpotModel)

    def __post_init__(self):
        self.imaging.check_diffraction(self.transition.wavelength)

    @property
    def pixel_size(self) -> float:
        """Object-plane size of one binned pixel (m)."""
        return object_pixel_size(self.imaging, self.camera)

    def pixel_grid(self):
        """Object-plane (x, y) coordinates of binned pixel centres, each (height, width)."""
        p = self.pixel_size
        cam = self.camera
        xs = (np.arange(cam.width) - (cam.width - 1) / 2.0) * p
        ys = (np.arange(cam.height) - (cam.height - 1) / 2.0) * p
        return np.meshgrid(xs, ys)

    def ion_pixel_position(self) -> tuple[float, float]:
        """Ion centre in pixel coordinates (column, row)."""
        p = self.pixel_size
        cx, cy = self.ion.center
        return cx / p + (self.camera.width - 1) / 2.0, cy / p + (self.camera.height - 1) / 2.0

    def electrons_per_joule(self) -> float:
        return self.imaging.transmission * self.camera.qe / self.transition.photon_energy


def object_pixel_size(imaging: ImagingSystem, camera: CameraModel) -> float:
    return camera.pixel_pitch * camera.binning / imaging.magnification


def beam_intensity(beam: BeamProfile, x, y):
    """Intensity (W/m^2) of the Gaussian beam at object-plane position (x, y)."""
    cx, cy = beam.center
    r2 = (np.asarray(x) - cx) ** 2 + (np.asarray(y) - cy) ** 2
    out = beam.peak_intensity * np.exp(-4.0 * math.log(2.0) * r2 / beam.fwhm**2)
    return float(out) if np.ndim(out) == 0 else out


def predict_peak_contrast(
    t: TransitionParams, laser: LaserParams, spot_fwhm: float, kappa_cal: float
) -> float:
    """Peak contrast of a Gaussian shadow that removes the atom's scattered power.

    Effective cross section over the area of a unit-amplitude Gaussian spot
    of the given FWHM, times the calibration factor, clamped to [0, 1].
    """
    if spot_fwhm <= 0:
        raise ValueError("spot_fwhm must be > 0")
    if kappa_cal <= 0:
        raise ValueError("kappa_cal must be > 0")
    sigma = spot_fwhm / FWHM_PER_SIGMA
    c = kappa_cal * effective_cross_section(t, laser) / (2.0 * math.pi * sigma**2)
    return min(max(c, 0.0), 1.0)


REFERENCE_CONTRAST = 0.031
REFERENCE_SPOT_FWHM = 485e-9


def calibrate_kappa_cal(
    t: TransitionParams | None = None,
    laser: LaserParams | None = None,
    spot_fwhm: float = REFERENCE_SPOT_FWHM,
    contrast: float = REFERENCE_CONTRAST,
) -> float:
    """Calibration factor that makes :func:`predict_peak_contrast` hit ``contrast``."""
    t = t or TransitionParams()
    laser = laser or LaserParams()
    return contrast / predict_peak_contrast(t, laser, spot_fwhm, 1.0)


KAPPA_CAL = calibrate_kappa_cal()


def spot_fwhm_model(
    t: TransitionParams,
    laser: LaserParams,
    imaging: ImagingSystem,
    trap_omega: float,
    ion_mass: float,
) -> float:
    """Image spot FWHM: PSF in quadrature with the ion's thermal motion.

    Raises NoCoolingEquilibrium for non-negative detuning.
    """
    temp = doppler_temperature(t, laser.detuning, laser.s0(t))
    sigma_motion = math.sqrt(CONSTANTS.kB * temp / (ion_mass * trap_omega**2))
    return math.hypot(imaging.psf_fwhm, FWHM_PER_SIGMA * sigma_motion)


def _check_fov(scene: Scene) -> None:
    cam, ion, p = scene.camera, scene.ion, scene.pixel_size
    half_w = cam.width * p / 2.0
    half_h = cam.height * p / 2.0
    cx, cy = ion.center
    if abs(cx) + 3 * ion.fwhm_x > half_w or abs(cy) + 3 * ion.fwhm_y > half_h:
        raise GeometryError(
            f"field of view {2 * half_w * 1e6:.2f} x {2 * half_h * 1e6:.2f} um does not cover "
            "the ion spot +/- 3 FWHM"
        )


def shadow_profile(scene: Scene, x, y):
    """Unit-peak Gaussian profile of the ion shadow."""
    ion = scene.ion
    cx, cy = ion.center
    sx = ion.fwhm_x / FWHM_PER_SIGMA
    sy = ion.fwhm_y / FWHM_PER_SIGMA
    return np.exp(-0.5 * (((x - cx) / sx) ** 2 + ((y - cy) / sy) ** 2))


def expected_image(scene: Scene) -> np.ndarray:
    """Noiseless photoelectrons per binned pixel, shape (height, width).

    The ion removes ``C * I(ion) * g(x, y)`` from the local beam intensity,
    where ``g`` is the unit-peak shadow profile; the removed power therefore
    integrates to ``C * I(ion) * 2 pi sx sy`` regardless of beam curvature.
    """
    _check_fov(scene)
    x, y = scene.pixel_grid()
    intensity = beam_intensity(scene.beam, x, y)
    i_ion = beam_intensity(scene.beam, *scene.ion.center)
    c = scene.ion.effective_contrast
    if c > 0:
        intensity = intensity - c * i_ion * shadow_profile(scene, x, y)
    if scene.imaging.etalon is not None:
        intensity = intensity * scene.imaging.etalon.ripple(x)
    energy = intensity * scene.pixel_size**2 * scene.camera.exposure
    return energy * scene.electrons_per_joule()


@dataclass
class Frame:
    counts: np.ndarray
    metadata: dict

    @property
    def width(self) -> int:
        return self.counts.shape[1]

    @property
    def height(self) -> int:
        return self.counts.shape[0]

    @property
    def kind(self) -> str:
        return self.metadata["kind"]


def frame_kind(scene: Scene) -> str:
    return "reference" if scene.ion.shelved else "signal"


def frame_rng(seed: int, kind: str) -> np.random.Generator:
    """PCG64 stream for one frame; signal and reference streams are independent."""
    return np.random.default_rng([int(seed), FRAME_KINDS.index(kind)])


def _jittered(scene: Scene, rng: np.random.Generator, subexposures: int) -> np.ndarray:
    beam = scene.beam
    if beam.pointing_jitter_rms == 0:
        return expected_image(scene)
    sub = replace(scene.camera, exposure=scene.camera.exposure / subexposures)
    total = np.zeros((scene.camera.height, scene.camera.width))
    for _ in range(subexposures):
        dx, dy = rng.normal(0.0, beam.pointing_jitter_rms, 2)
        moved = replace(beam, center=(beam.center[0] + dx, beam.center[1] + dy))
        total += expected_image(replace(scene, beam=moved, camera=sub))
    return total


def render_frame(scene: Scene, seed: int, subexposures: int = 1) -> Frame:
    """One stochastic camera frame.

    Poisson shot noise plus Gaussian read noise on the photoelectrons, clipped
    at the full well, converted to ADU and clipped to the ADC range. The frame
    kind follows ``scene.ion.shelved``. With pointing jitter enabled, the
    exposure is split into ``subexposures`` parts each with its own beam
    displacement, accumulated on chip before a single readout.
    """
    if subexposures < 1:
        raise ValueError("subexposures must be >= 1")
    kind = frame_kind(scene)
    rng = frame_rng(seed, kind)
    expected = _jittered(scene, rng, subexposures)
    cam = scene.camera
    electrons = rng.poisson(expected).astype(float)
    if cam.read_noise > 0:
        electrons += rng.normal(0.0, cam.read_noise, expected.shape)
    overflow = bool(np.any(expected > cam.full_well))
    electrons = np.clip(electrons, 0.0, cam.full_well)
    adu = np.rint(electrons / cam.gain)
    saturated = bool(np.any(adu > cam.max_count))
    counts = np.clip(adu, 0, cam.max_count).astype(np.uint16)
    metadata = {
        "kind": kind,
        "seed": int(seed),
        "exposure": cam.exposure,
        "binning": cam.binning,
        "subexposures": subexposures,
        "clipped": overflow or saturated,
        "expected_peak_electrons": float(expected.max()),
    }
    return Frame(counts=counts, metadata=metadata)


def render_pair(scene: Scene, seed: int, subexposures: int = 1) -> tuple[Frame, Frame]:
    """Signal (ion absorbing) and reference (ion shelved) frames from one seed.

    ``subexposures > 1`` emulates interleaved acquisition: each frame is built
    from that many jittered sub-exposures. Without jitter the two modes agree.
    """
    signal = render_frame(replace(scene, ion=replace(scene.ion, shelved=False)), seed, subexposures)
    reference = render_frame(replace(scene, ion=replace(scene.ion, shelved=True)), seed, subexposures)
    return signal, reference
