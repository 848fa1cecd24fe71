import math

import numpy as np
import pytest

from shadowcast.curvefit import FIT_FAILED, NON_DETECTION
from shadowcast.imaging import FWHM_PER_SIGMA
from shadowcast.photophysics import max_absorbed_power, resonant_cross_section
from shadowcast.scans import default_truth, generate_scan, point_scene, point_seed, truth_value


def test_default_truths(scene):
    det = default_truth("detuning-scan", scene)
    assert truth_value("detuning-scan", det, -8.0) == pytest.approx(0.031, rel=1e-12)
    assert truth_value("detuning-scan", det, 0.0) == 0.0
    pw = default_truth("power-scan", scene)
    assert pw["P_max_fit"] == pytest.approx(max_absorbed_power(scene.transition), rel=1e-15)
    assert pw["slope"] == pytest.approx(0.300645940455, rel=1e-9)
    with pytest.raises(ValueError):
        default_truth("voltage-scan", scene)


def test_power_point_scene(scene):
    truth = default_truth("power-scan", scene)
    sc = point_scene("power-scan", scene, truth, 20e-12)
    assert sc.beam.peak_intensity * resonant_cross_section(sc.transition) == pytest.approx(20e-12, rel=1e-12)
    s = sc.ion.fwhm_x / FWHM_PER_SIGMA
    removed = sc.ion.peak_contrast * sc.beam.peak_intensity * 2 * math.pi * s * s
    assert removed == pytest.approx(truth_value("power-scan", truth, 20e-12), rel=1e-12)


def test_auto_exposure(scene):
    truth = default_truth("intensity-scan", scene)
    hi = point_scene("intensity-scan", scene, truth, 2000.0)
    lo = point_scene("intensity-scan", scene, truth, 100.0)
    assert hi.camera.exposure == pytest.approx(570.0 / 2000.0, rel=1e-9)
    assert lo.camera.exposure == scene.camera.exposure
    fixed = point_scene("intensity-scan", scene, truth, 2000.0, auto_exposure=False)
    assert fixed.camera.exposure == scene.camera.exposure


def test_point_seeds_distinct():
    seeds = {point_seed(42, i) for i in range(100)}
    assert len(seeds) == 100
    assert point_seed(42, 3) == point_seed(42, 3)


def test_detuning_scan_rows(scene):
    series = generate_scan("detuning-scan", scene, [2.0, -30.0, -10.0, 0.0, -20.0], seed=3)
    np.testing.assert_array_equal(series.controls, [-30.0, -20.0, -10.0, 0.0, 2.0])
    assert series.flags[3] == [NON_DETECTION] and series.flags[4] == [NON_DETECTION]
    assert np.all(series.values[3:] == 0.0)
    assert all(FIT_FAILED not in f for f in series.flags[:3])
    assert np.all(series.values[:3] > 0)


def test_scan_deterministic_and_keeps_frames(scene, tmp_path):
    controls = np.geomspace(100, 1000, 4)
    a = generate_scan("intensity-scan", scene, controls, seed=9, keep_frames=tmp_path)
    b = generate_scan("intensity-scan", scene, controls, seed=9)
    np.testing.assert_array_equal(a.values, b.values)
    np.testing.assert_array_equal(a.sigmas, b.sigmas)
    assert a.frames[0] == ["point000_signal.pgm", "point000_reference.pgm"]
    assert (tmp_path / "point003_reference.json").exists()


def test_power_scan_values_are_watts(scene):
    series = generate_scan("power-scan", scene, [10e-12, 40e-12], seed=4)
    truth = default_truth("power-scan", scene)
    for c, v, s in zip(series.controls, series.values, series.sigmas):
        assert abs(v - truth_value("power-scan", truth, c)) < 5 * s


def test_empty_scan(scene):
    assert len(generate_scan("detuning-scan", scene, [], seed=1)) == 0
