"""Command-line entry point: ``shadowcast simulate | analyze | scan | fit | constants``.

Exit codes: 0 success, 1 configuration error, 2 analysis non-convergence,
3 I/O error.
"""
from __future__ import annotations

import argparse
import dataclasses
import math
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .analysis import AnalysisError, analyze_pair, diverted_power, diverted_power_error
from .config import FIELD_NAMES, ConfigError, RunConfig, build_config, read_config_file
from .curvefit import KINDS, InsufficientData, ScanSeries, fit_series
from .frameio import dump_json, frame_scene, load_frame, save_frame, write_pgm
from .imaging import beam_intensity, render_pair
from .photophysics import (
    angular_to_mhz,
    max_absorbed_power,
    resonant_cross_section,
    saturation_intensity,
)
from .scans import generate_scan

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_NO_CONVERGENCE = 2
EXIT_IO = 3

SCAN_KINDS = {"detuning": "detuning-scan", "intensity": "intensity-scan", "power": "power-scan"}
# start, stop, points, log spacing; units are those of the scan series
SCAN_DEFAULTS = {
    "detuning-scan": (-40.0, 0.0, 12, False),
    "intensity-scan": (50.0, 2000.0, 8, True),
    "power-scan": (5e-12, 500e-12, 10, True),
}
FLAG_ALIASES = {"wavelength": ["--lambda"], "lifetime": ["--tau"]}


class CommandError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


# -- argument parsing ------------------------------------------------------------


def _config_flags(parser: argparse.ArgumentParser, skip=()) -> None:
    group = parser.add_argument_group("run parameters (override --config)")
    for f in dataclasses.fields(RunConfig):
        if f.name in skip:
            continue
        flags = [f"--{f.name.replace('_', '-')}"] + FLAG_ALIASES.get(f.name, [])
        unit = f.metadata.get("unit")
        default = f.default if f.default is not dataclasses.MISSING else None
        help_text = f"default {default}" + (f" {unit[1]}" if unit else "")
        group.add_argument(*flags, dest=f.name, default=None, metavar="VALUE", help=help_text)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="shadowcast", description="Simulate and analyze single-atom absorption images.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="key=value file, or a JSON echo of a previous run")
    _config_flags(common, skip=("use_filter",))
    common.add_argument("--no-filter", dest="use_filter", action="store_const", const=False, default=None,
                        help="fit the unfiltered contrast map")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("constants", parents=[common], help="print the transition desk-check table")

    sub.add_parser("simulate", parents=[common], help="render a signal/reference frame pair")

    p = sub.add_parser("analyze", parents=[common], help="fit the absorption image of a frame pair")
    p.add_argument("signal", type=Path)
    p.add_argument("reference", type=Path)
    p.add_argument("--filtered-pgm", type=Path, help="also write the analyzed contrast map as a PGM")

    p = sub.add_parser("scan", parents=[common], help="synthetic detuning, intensity or power scan")
    p.add_argument("kind", choices=sorted(SCAN_KINDS))
    p.add_argument("--keep-frames", action="store_true", help="keep every frame pair under OUT/frames")

    p = sub.add_parser("fit", parents=[common], help="fit a scan CSV")
    p.add_argument("csv", type=Path)
    p.add_argument("--kind", choices=sorted(SCAN_KINDS), required=True)
    return parser


def resolve_config(args) -> RunConfig:
    file_values = read_config_file(args.config) if getattr(args, "config", None) else {}
    overrides = {name: getattr(args, name, None) for name in FIELD_NAMES}
    return build_config(file_values, overrides)


# -- helpers -------------------------------------------------------------------


def _outdir(cfg: RunConfig) -> Path:
    out = Path(cfg.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CommandError(f"cannot create output directory {out}: {exc}", EXIT_IO) from None
    return out


def _write_json(obj, path: Path) -> None:
    try:
        dump_json(obj, path)
    except OSError as exc:
        raise CommandError(f"cannot write {path}: {exc}", EXIT_IO) from None


def _load(path: Path):
    try:
        return load_frame(path)
    except OSError as exc:
        raise CommandError(f"cannot read {path}: {exc}", EXIT_IO) from None
    except ValueError as exc:
        raise CommandError(f"bad frame {path}: {exc}", EXIT_IO) from None


def _finite(x):
    """JSON-safe float: NaN and inf become None."""
    return float(x) if x is not None and math.isfinite(x) else None


def scan_controls(cfg: RunConfig, kind: str) -> np.ndarray:
    if cfg.scan_controls:
        try:
            return np.array([float(s) for s in cfg.scan_controls.replace(";", ",").split(",") if s.strip()])
        except ValueError:
            raise ConfigError(f"scan_controls must be a comma-separated list, got {cfg.scan_controls!r}") from None
    start, stop, num, log = SCAN_DEFAULTS[kind]
    start = start if cfg.scan_start is None else cfg.scan_start
    stop = stop if cfg.scan_stop is None else cfg.scan_stop
    num = num if cfg.scan_num is None else cfg.scan_num
    log = log if cfg.scan_log is None else cfg.scan_log
    if log:
        if start <= 0 or stop <= 0:
            raise ConfigError("log-spaced scans need positive start and stop")
        return np.geomspace(start, stop, num)
    return np.linspace(start, stop, num)


# -- commands ------------------------------------------------------------------


def constants_table(cfg: RunConfig) -> dict:
    t = cfg.transition()
    isat = saturation_intensity(t)
    sigma0 = resonant_cross_section(t)
    laser = cfg.laser()
    return {
        "lambda_nm": t.wavelength * 1e9,
        "tau_ns": t.lifetime * 1e9,
        "gamma_2pi_MHz": t.linewidth_hz * 1e-6,
        "I_sat_W_m2": isat,
        "sigma0_m2": sigma0,
        "P_max_pW": max_absorbed_power(t) * 1e12,
        "sigma0_I_sat_pW": sigma0 * isat * 1e12,
        "intensity_W_m2": laser.intensity,
        "s0": laser.s0(t),
        "detuning_MHz": angular_to_mhz(laser.detuning),
    }


def cmd_constants(cfg: RunConfig, args) -> int:
    table = constants_table(cfg)
    rows = [
        ("lambda", f"{table['lambda_nm']:.4g} nm"),
        ("tau", f"{table['tau_ns']:.4g} ns"),
        ("Gamma/2pi", f"{table['gamma_2pi_MHz']:.4f} MHz"),
        ("I_sat", f"{table['I_sat_W_m2']:.2f} W/m^2"),
        ("sigma0", f"{table['sigma0_m2']:.4e} m^2"),
        ("P_max", f"{table['P_max_pW']:.3f} pW"),
        ("sigma0*I_sat", f"{table['sigma0_I_sat_pW']:.3f} pW"),
        ("I", f"{table['intensity_W_m2']:.2f} W/m^2"),
        ("s0", f"{table['s0']:.4f}"),
    ]
    width = max(len(k) for k, _ in rows)
    for k, v in rows:
        print(f"{k:<{width}}  {v}")
    return EXIT_OK


def cmd_simulate(cfg: RunConfig, args) -> int:
    scene = cfg.to_scene()
    seed = cfg.resolved_seed()
    out = _outdir(cfg)
    sig, ref = render_pair(scene, seed, cfg.subexposures)
    try:
        save_frame(sig, out / "signal.pgm", scene)
        save_frame(ref, out / "reference.pgm", scene)
    except OSError as exc:
        raise CommandError(f"cannot write frames: {exc}", EXIT_IO) from None
    meta = {
        "command": "simulate",
        "config": cfg.echo(),
        "files": {"signal": "signal.pgm", "reference": "reference.pgm"},
        "peak_contrast": scene.ion.peak_contrast,
        "expected_peak_electrons": ref.metadata["expected_peak_electrons"],
        "pixel_size": scene.pixel_size,
        "clipped": bool(sig.metadata["clipped"] or ref.metadata["clipped"]),
    }
    _write_json(meta, out / "metadata.json")
    print(f"wrote {out / 'signal.pgm'} and {out / 'reference.pgm'} (seed {seed})")
    return EXIT_OK


def _write_map_pgm(image, path: Path) -> None:
    """Linear 16-bit encoding of a contrast map; the sidecar holds offset and scale."""
    v = np.where(image.mask, image.values, np.nan)
    lo, hi = float(np.nanmin(v)), float(np.nanmax(v))
    scale = (hi - lo) / 65535 if hi > lo else 1.0
    counts = np.where(image.mask, np.rint((np.nan_to_num(v, nan=lo) - lo) / scale), 0).astype(np.uint16)
    try:
        write_pgm(path, counts)
        dump_json({"offset": lo, "scale": scale, "decode": "value = offset + scale * count"},
                  path.with_suffix(".json"))
    except OSError as exc:
        raise CommandError(f"cannot write {path}: {exc}", EXIT_IO) from None


def cmd_analyze(cfg: RunConfig, args) -> int:
    sig = _load(args.signal)
    ref = _load(args.reference)
    scene = frame_scene(sig) or frame_scene(ref) or cfg.to_scene()
    out = _outdir(cfg)
    try:
        res = analyze_pair(sig, ref, use_filter=cfg.use_filter, r_high=cfg.r_high, r_low=cfg.r_low, floor=cfg.floor)
    except AnalysisError as exc:
        report = {"command": "analyze", "config": cfg.echo(), "converged": False, "error": str(exc)}
        _write_json(report, out / "analysis.json")
        print(f"analysis failed: {exc}", file=sys.stderr)
        return EXIT_NO_CONVERGENCE
    fit = res.fit
    intensity = beam_intensity(scene.beam, *scene.ion.center)
    power = power_err = math.nan
    fwhm_nm = math.nan
    if fit.converged:
        power = diverted_power(fit, intensity, scene.pixel_size, scene.beam.fwhm)
        power_err = diverted_power_error(fit, intensity, scene.pixel_size, scene.beam.fwhm)
        fwhm_nm = fit.fwhm * scene.pixel_size * 1e9
    report = {
        "command": "analyze",
        "config": cfg.echo(),
        "inputs": {"signal": args.signal.name, "reference": args.reference.name},
        "converged": fit.converged,
        "filtered": cfg.use_filter,
        "contrast": _finite(fit.amplitude),
        "contrast_err": _finite(fit.uncertainties.get("amplitude")),
        "fwhm_nm": _finite(fwhm_nm),
        "snr": _finite(res.snr),
        "diverted_power_W": _finite(power),
        "diverted_power_err_W": _finite(power_err),
        "peak_intensity_W_m2": intensity,
        "flags": res.flags,
        "fit": fit.to_dict(),
        "raw_fit": res.raw_fit.to_dict(),
    }
    report = _json_safe(report)
    _write_json(report, out / "analysis.json")
    if args.filtered_pgm:
        _write_map_pgm(res.analyzed, args.filtered_pgm)
    if not fit.converged:
        print(f"fit did not converge: {fit.message}", file=sys.stderr)
        return EXIT_NO_CONVERGENCE
    err = fit.uncertainties["amplitude"]
    print(f"contrast       {fit.amplitude:.5f} +/- {err:.5f}")
    print(f"fwhm           {fwhm_nm:.1f} nm")
    print(f"snr            {res.snr:.2f}")
    print(f"diverted power {power * 1e12:.3f} +/- {power_err * 1e12:.3f} pW")
    if "negative_amplitude" in res.flags:
        print("warning: negative amplitude; signal and reference may be swapped", file=sys.stderr)
    return EXIT_OK


def _json_safe(obj):
    if isinstance(obj, dict):
        return {k: _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_safe(v) for v in obj]
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    return obj


def _fit_report(cfg: RunConfig, series: ScanSeries, csv_name: str) -> tuple[dict, int]:
    report = {"config": cfg.echo(), "kind": series.kind, "unit": series.unit, "series": csv_name,
              "points": len(series), "usable_points": int(series.usable().sum())}
    try:
        res = fit_series(series)
    except InsufficientData as exc:
        report.update(converged=False, error=str(exc))
        return report, EXIT_NO_CONVERGENCE
    report["fit"] = _json_safe(res.to_dict())
    report["converged"] = res.converged
    return report, EXIT_OK if res.converged else EXIT_NO_CONVERGENCE


def _print_fit(report: dict) -> None:
    if "fit" not in report:
        print(f"fit failed: {report.get('error')}", file=sys.stderr)
        return
    fit = report["fit"]
    for name, value in fit["params"].items():
        err = fit["uncertainties"].get(name)
        print(f"{name:<10} {value:.6g} +/- {err:.3g}" if err is not None else f"{name:<10} {value:.6g}")
    for name, value in fit["derived"].items():
        print(f"{name:<10} {value:.6g}" if isinstance(value, float) else f"{name:<10} {value}")
    if not report["converged"]:
        print(f"fit did not converge: {fit['message']}", file=sys.stderr)


def cmd_scan(cfg: RunConfig, args) -> int:
    kind = SCAN_KINDS[args.kind]
    controls = scan_controls(cfg, kind)
    if controls.size < 4:
        raise ConfigError(f"a scan needs >= 4 control points, got {controls.size}")
    out = _outdir(cfg)
    frames = out / f"frames_{args.kind}" if args.keep_frames else None
    try:
        series = generate_scan(
            kind, cfg.to_scene(), controls, cfg.resolved_seed(),
            detuning_mhz=cfg.detuning, auto_exposure=cfg.auto_exposure,
            use_filter=cfg.use_filter, keep_frames=frames,
        )
    except OSError as exc:
        raise CommandError(f"cannot write frames: {exc}", EXIT_IO) from None
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    csv_name = f"scan_{args.kind}.csv"
    try:
        series.to_csv(out / csv_name)
    except OSError as exc:
        raise CommandError(f"cannot write {csv_name}: {exc}", EXIT_IO) from None
    report, code = _fit_report(cfg, series, csv_name)
    report["command"] = "scan"
    report["controls"] = series.controls.tolist()
    if frames is not None:
        report["frames"] = [
            [f"{frames.name}/{p}" for p in pair] if pair else None for pair in series.frames
        ]
    _write_json(report, out / f"fit_{args.kind}.json")
    print(f"wrote {out / csv_name} ({len(series)} points, {report['usable_points']} usable)")
    _print_fit(report)
    return code


def cmd_fit(cfg: RunConfig, args) -> int:
    kind = SCAN_KINDS[args.kind]
    try:
        series = ScanSeries.from_csv(args.csv, kind)
    except OSError as exc:
        raise CommandError(f"cannot read {args.csv}: {exc}", EXIT_IO) from None
    except (KeyError, ValueError) as exc:
        raise CommandError(f"bad scan CSV {args.csv}: {exc}", EXIT_IO) from None
    out = _outdir(cfg)
    report, code = _fit_report(cfg, series, args.csv.name)
    report["command"] = "fit"
    _write_json(report, out / f"fit_{args.kind}.json")
    _print_fit(report)
    return code


COMMANDS = {
    "constants": cmd_constants,
    "simulate": cmd_simulate,
    "analyze": cmd_analyze,
    "scan": cmd_scan,
    "fit": cmd_fit,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(args)
        return COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CommandError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
