"""End-to-end synthetic scans: render one frame pair per control value and analyze it."""
from __future__ import annotations

import math
from dataclasses import replace
from pathlib import Path

import numpy as np

from .analysis import AnalysisError, analyze_pair, diverted_power, diverted_power_error
from .curvefit import FIT_FAILED, KINDS, NON_DETECTION, ScanSeries
from .frameio import save_frame
from .imaging import FWHM_PER_SIGMA, BeamProfile, Scene, beam_intensity, render_pair
from .photophysics import (
    low_intensity_fraction,
    max_absorbed_power,
    mhz_to_angular,
    resonant_cross_section,
)

NON_DETECTION_SIGMA = 1.0
INCONSISTENT = "inconsistent"
REFERENCE_DETUNING_MHZ = -8.0
REFERENCE_CONTRAST = 0.031


def default_truth(kind: str, scene: Scene, detuning_mhz: float = REFERENCE_DETUNING_MHZ) -> dict:
    """Generator parameters for each scan kind, expressed in the fit model's parameters.

    Detuning scans use a 35 MHz Lorentzian scaled to give the reference
    contrast at the reference detuning; intensity scans use C_max = 3.2 % and
    I_sat_fit = 585 W/m^2; power scans saturate at the two-level maximum
    absorbed power with the low-intensity diverted fraction of the transition.
    """
    if kind == "detuning-scan":
        gamma = 35.0
        return {"A": REFERENCE_CONTRAST * (1 + 4 * REFERENCE_DETUNING_MHZ**2 / gamma**2), "gamma_L": gamma}
    if kind == "intensity-scan":
        return {"C_max": 0.032, "I_sat_fit": 585.0}
    if kind == "power-scan":
        t = scene.transition
        return {
            "P_max_fit": max_absorbed_power(t),
            "slope": low_intensity_fraction(t, mhz_to_angular(detuning_mhz)),
        }
    raise ValueError(f"unknown scan kind {kind!r}")


def truth_value(kind: str, truth: dict, control: float) -> float:
    """Noise-free observable of the generator at one control value."""
    if kind == "detuning-scan":
        if control >= 0:
            return 0.0
        return truth["A"] / (1 + 4 * control**2 / truth["gamma_L"] ** 2)
    if kind == "intensity-scan":
        return truth["C_max"] / (1 + control / truth["I_sat_fit"])
    if kind == "power-scan":
        q = truth["slope"] * control / truth["P_max_fit"]
        return truth["P_max_fit"] * q / (1 + q)
    raise ValueError(f"unknown scan kind {kind!r}")


def point_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([int(seed), int(index)]).generate_state(1)[0])


def _spot_area(scene: Scene) -> float:
    ion = scene.ion
    return 2 * math.pi * (ion.fwhm_x / FWHM_PER_SIGMA) * (ion.fwhm_y / FWHM_PER_SIGMA)


def point_scene(kind: str, scene: Scene, truth: dict, control: float, auto_exposure: bool = True) -> Scene:
    """Scene for one scan point.

    Intensity and power scans change the beam power; with ``auto_exposure``
    the exposure is shortened in proportion above the base intensity so the
    camera stays inside its dynamic range.
    """
    base_intensity = scene.beam.peak_intensity
    intensity = base_intensity
    if kind == "intensity-scan":
        intensity = control
    elif kind == "power-scan":
        intensity = control / resonant_cross_section(scene.transition)
    value = truth_value(kind, truth, control)
    contrast = value if kind != "power-scan" else value / (intensity * _spot_area(scene))
    if not (0 <= contrast <= 1):
        raise ValueError(f"generator contrast {contrast:.4g} at control {control} outside [0, 1]")
    beam = scene.beam
    if intensity != base_intensity:
        beam = BeamProfile.from_peak_intensity(
            intensity, beam.fwhm, center=beam.center, pointing_jitter_rms=beam.pointing_jitter_rms
        )
    camera = scene.camera
    if auto_exposure and intensity > base_intensity:
        camera = replace(camera, exposure=camera.exposure * base_intensity / intensity)
    return replace(scene, beam=beam, camera=camera, ion=replace(scene.ion, peak_contrast=contrast))


def generate_scan(
    kind: str,
    scene: Scene,
    controls,
    seed: int,
    truth: dict | None = None,
    detuning_mhz: float = REFERENCE_DETUNING_MHZ,
    auto_exposure: bool = True,
    use_filter: bool = True,
    keep_frames: str | Path | None = None,
) -> ScanSeries:
    """Render and analyze one frame pair per control value.

    Controls are MHz for detuning scans, W/m^2 for intensity scans and W of
    power incident on the resonant cross section for power scans. The series
    values are fitted contrasts (diverted power in W for power scans) with
    the fit's 1-sigma uncertainty. Non-negative detunings are recorded as
    non-detections without rendering; failed image fits are flagged and kept.
    Fits are cross-checked for a common ion position and width (see
    :func:`_refit_failures`).
    """
    if kind not in KINDS:
        raise ValueError(f"unknown scan kind {kind!r}")
    controls = np.sort(np.asarray(list(controls), dtype=float))
    if controls.size == 0:
        return ScanSeries(kind, [], [], [])
    truth = truth or default_truth(kind, scene, detuning_mhz)
    points = []
    for i, control in enumerate(controls):
        if kind == "detuning-scan" and control >= 0:
            points.append(None)
            continue
        sc = point_scene(kind, scene, truth, control, auto_exposure)
        sig, ref = render_pair(sc, point_seed(seed, i))
        points.append((sc, sig, ref, _analyze(sig, ref, use_filter)))
    _refit_failures(points, use_filter)

    values, sigmas, flags, frames = [], [], [], []
    for i, point in enumerate(points):
        if point is None:
            values.append(0.0)
            sigmas.append(NON_DETECTION_SIGMA)
            flags.append([NON_DETECTION])
            frames.append(None)
            continue
        sc, sig, ref, res = point
        if keep_frames is not None:
            out = Path(keep_frames)
            out.mkdir(parents=True, exist_ok=True)
            stem = f"point{i:03d}"
            save_frame(sig, out / f"{stem}_signal.pgm", sc)
            save_frame(ref, out / f"{stem}_reference.pgm", sc)
            frames.append([f"{stem}_signal.pgm", f"{stem}_reference.pgm"])
        else:
            frames.append(None)
        point_flags = [f for f in res.flags if f in ("clipped", INCONSISTENT)] if res is not None else []
        val = err = math.nan
        if _usable(res) and INCONSISTENT not in res.flags:
            fit = res.fit
            if kind == "power-scan":
                intensity = beam_intensity(sc.beam, *sc.ion.center)
                val = diverted_power(fit, intensity, sc.pixel_size, sc.beam.fwhm)
                err = diverted_power_error(fit, intensity, sc.pixel_size, sc.beam.fwhm)
            else:
                val, err = fit.amplitude, fit.uncertainties["amplitude"]
        if not (math.isfinite(val) and err > 0):
            values.append(0.0)
            sigmas.append(1.0)
            flags.append(point_flags + [FIT_FAILED])
            continue
        values.append(val)
        sigmas.append(err)
        flags.append(point_flags)
    return ScanSeries(kind, controls, values, sigmas, flags, frames)


def _analyze(sig, ref, use_filter, init=None):
    try:
        return analyze_pair(sig, ref, use_filter=use_filter, init=init)
    except AnalysisError:
        return None


def _usable(res) -> bool:
    return res is not None and res.fit.converged and math.isfinite(res.fit.uncertainties["amplitude"])


def _consistent(res, consensus) -> bool:
    """Fit lies on the shared ion: centre within half a FWHM, width within a factor 2."""
    if not _usable(res):
        return False
    p = res.fit.params
    fwhm = math.sqrt(consensus[3] * consensus[4])
    shift = math.hypot(p[1] - consensus[1], p[2] - consensus[2])
    ratio = math.sqrt(p[3] * p[4]) / fwhm
    return shift <= 0.5 * fwhm and 0.5 <= ratio <= 2.0 and p[0] * consensus[0] > 0


def _refit_failures(points, use_filter) -> None:
    """Re-examine fits against the median position and width of all converged fits.

    All points of a scan image the same ion, so its position and spot size
    are shared across the data set. Failed or inconsistent fits are redone
    from that consensus; a fit still inconsistent afterwards is marked
    ``INCONSISTENT`` so the point is excluded.
    """
    good = [p[3].fit.params for p in points if p is not None and _usable(p[3])]
    if len(good) < 3:
        return
    consensus = np.median(np.array(good), axis=0)
    for k, point in enumerate(points):
        if point is None or _consistent(point[3], consensus):
            continue
        sc, sig, ref, res = point
        retry = _analyze(sig, ref, use_filter, init=consensus)
        if retry is not None and _consistent(retry, consensus):
            res = retry
        elif res is not None and _usable(res):
            res.flags.append(INCONSISTENT)
        points[k] = (sc, sig, ref, res)
