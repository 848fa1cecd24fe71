import json

import pytest

from shadowcast.config import (
    SEED_ENV,
    ConfigError,
    RunConfig,
    build_config,
    parse_quantity,
    read_config_file,
)
from shadowcast.imaging import KAPPA_CAL


def test_defaults_are_operating_point():
    cfg = RunConfig()
    scene = cfg.to_scene()
    assert scene.transition.wavelength == pytest.approx(369.5e-9)
    assert scene.transition.lifetime == pytest.approx(8.1e-9)
    assert scene.beam.peak_intensity == pytest.approx(570.0, rel=1e-12)
    assert scene.beam.fwhm == pytest.approx(4.8e-6)
    assert scene.imaging.na == 0.64 and scene.imaging.magnification == 615.0
    assert scene.imaging.transmission == 0.06
    assert scene.camera.binning == 4 and scene.camera.exposure == 1.0
    assert scene.ion.peak_contrast == pytest.approx(0.031, rel=1e-12)
    assert cfg.laser().detuning == pytest.approx(-2 * 3.141592653589793 * 8e6)
    assert KAPPA_CAL > 0


def test_beam_power_overrides_intensity():
    cfg = RunConfig(beam_power=15.0)
    assert cfg.laser().intensity == pytest.approx(574.571875, rel=1e-8)


@pytest.mark.parametrize(
    "text,unit,expected",
    [
        ("8.1", ("time", "ns"), 8.1),
        ("8.1ns", ("time", "ns"), 8.1),
        ("8.1e-9s", ("time", "ns"), 8.1),
        ("4.8um", ("length", "nm"), 4800.0),
        ("0.015uW", ("power", "nW"), 15.0),
        ("-8MHz", ("frequency", "MHz"), -8.0),
        ("57mW/cm^2", ("intensity", "W/m^2"), 570.0),
        ("3", None, 3.0),
    ],
)
def test_parse_quantity(text, unit, expected):
    assert parse_quantity(text, unit) == pytest.approx(expected, rel=1e-12)


@pytest.mark.parametrize("text,unit", [("8.1kg", ("time", "ns")), ("abc", None), ("3ns", None)])
def test_parse_quantity_errors(text, unit):
    with pytest.raises(ValueError):
        parse_quantity(text, unit)


def test_file_and_flag_precedence(tmp_path):
    f = tmp_path / "run.cfg"
    f.write_text("# experiment\nlifetime = 8.0ns\nexposure = 0.4  # short\nseed = 5\nuse-filter = no\n")
    values = read_config_file(f)
    cfg = build_config(values, {"exposure": "0.5", "binning": None}, env={})
    assert cfg.lifetime == 8.0
    assert cfg.exposure == 0.5
    assert cfg.seed == 5
    assert cfg.use_filter is False


def test_seed_environment_fallback():
    assert build_config({}, {}, env={SEED_ENV: "17"}).seed == 17
    assert build_config({"seed": "3"}, {}, env={SEED_ENV: "17"}).seed == 3
    assert build_config({}, {"seed": "4"}, env={SEED_ENV: "17"}).seed == 4
    assert build_config({}, {}, env={}).resolved_seed() == 0


def test_echo_round_trip(tmp_path):
    cfg = build_config({}, {"detuning": "-12", "seed": "9", "contrast": "0.02"}, env={})
    (tmp_path / "echo.json").write_text(json.dumps({"config": cfg.echo(), "other": 1}))
    again = build_config(read_config_file(tmp_path / "echo.json"), {}, env={})
    assert again.echo() == cfg.echo()
    assert again.to_scene() == cfg.to_scene()


@pytest.mark.parametrize(
    "values",
    [
        {"na": "0"},
        {"kappa_pol": "2"},
        {"binning": "2.5"},
        {"binning": "3"},
        {"use_filter": "maybe"},
        {"contrast": "1.5"},
        {"r_low": "0.5"},
        {"psf_fwhm": "100"},
        {"nonsense": "1"},
    ],
)
def test_config_errors(values):
    with pytest.raises(ConfigError):
        build_config(values, {}, env={}).to_scene()


def test_config_file_errors(tmp_path):
    bad = tmp_path / "bad.cfg"
    bad.write_text("just words\n")
    with pytest.raises(ConfigError):
        read_config_file(bad)
    with pytest.raises(ConfigError):
        read_config_file(tmp_path / "missing.cfg")
    unknown = tmp_path / "u.cfg"
    unknown.write_text("warp = 9\n")
    with pytest.raises(ConfigError, match="unknown"):
        read_config_file(unknown)
