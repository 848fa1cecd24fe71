"""Absorption-image analysis: contrast map, bandpass filter, 2D Gaussian fit.

Pipeline: a signal/reference frame pair is turned into a per-pixel contrast
map ``(reference - signal) / reference``, bandpass filtered by a difference of
two Gaussian blurs, and fitted with a 2D Gaussian whose amplitude is the
contrast of the absorber.

Fits to a filtered map use the *filtered* Gaussian as model (a Gaussian
convolved with a Gaussian stays Gaussian, with variances adding and the peak
reduced accordingly), so the reported amplitude and widths describe the
unfiltered spot.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .imaging import FWHM_PER_SIGMA, Frame
from .lsq import FitResult, Model, least_squares

DEFAULT_FLOOR = 100
PARAM_NAMES = ("amplitude", "center_x", "center_y", "fwhm_x", "fwhm_y", "offset")
MIN_FWHM_PX = 1.0
DETECT_RADIUS_PX = 2.0
# <r^2>/(2 sigma^2) of a 2D Gaussian weighted by itself inside its half-maximum contour
_HALF_MAX_MOMENT = (1.0 - 0.5 * (1.0 + math.log(2.0))) / 0.5


class AnalysisError(ValueError):
    pass


@dataclass
class AbsorptionImage:
    """Per-pixel contrast map. ``mask`` is True where the pixel is valid.

    ``sigma`` holds relative per-pixel noise (shot-noise shape only, arbitrary
    scale) used to weight fits; ``None`` means uniform weights.
    """

    values: np.ndarray
    mask: np.ndarray
    provenance: dict = field(default_factory=dict)
    filter_radii: tuple[float, float] | None = None
    sigma: np.ndarray | None = None
    unfiltered: "AbsorptionImage | None" = None

    @property
    def shape(self):
        return self.values.shape

    @property
    def pixel_size(self) -> float | None:
        return self.provenance.get("pixel_size")


def normalize_difference(signal: Frame, reference: Frame, floor: float = DEFAULT_FLOOR) -> AbsorptionImage:
    """Subtract the signal from the reference and normalize by the reference.

    Pixels whose reference count is below ``floor`` are masked.
    """
    if signal.counts.shape != reference.counts.shape:
        raise AnalysisError(f"frame dimensions differ: {signal.counts.shape} vs {reference.counts.shape}")
    for key in ("binning", "exposure"):
        a, b = signal.metadata.get(key), reference.metadata.get(key)
        if a is not None and b is not None and a != b:
            raise AnalysisError(f"frames differ in {key}: {a} vs {b}")
    ref = reference.counts.astype(float)
    sig = signal.counts.astype(float)
    mask = ref >= floor
    if not mask.any():
        raise AnalysisError("all pixels masked: reference below floor everywhere")
    values = np.zeros_like(ref)
    values[mask] = (ref[mask] - sig[mask]) / ref[mask]
    # var(C) ~ (sig + sig^2/ref) / ref^2 in ADU up to the camera gain
    sigma = np.ones_like(ref)
    s_pos = np.maximum(sig[mask], 1.0)
    sigma[mask] = np.sqrt(s_pos * (1.0 + s_pos / ref[mask])) / ref[mask]
    provenance = {
        "signal": {k: v for k, v in signal.metadata.items() if k != "scene"},
        "reference": {k: v for k, v in reference.metadata.items() if k != "scene"},
        "floor": floor,
    }
    scene = reference.metadata.get("scene") or signal.metadata.get("scene")
    if scene is not None:
        cam, img = scene["camera"], scene["imaging"]
        provenance["pixel_size"] = cam["pixel_pitch"] * cam["binning"] / img["magnification"]
    return AbsorptionImage(values=values, mask=mask, provenance=provenance, sigma=sigma)


def _blur_array(values: np.ndarray, radius: float, mask: np.ndarray | None) -> np.ndarray:
    if radius < 0:
        raise ValueError("blur radius must be >= 0")
    values = np.asarray(values, dtype=float)
    if radius == 0:
        return values.copy()
    weight = np.ones_like(values) if mask is None else mask.astype(float)
    num = ndimage.gaussian_filter(values * weight, radius, mode="constant", cval=0.0)
    den = ndimage.gaussian_filter(weight, radius, mode="constant", cval=0.0)
    out = np.zeros_like(values)
    ok = den > 1e-12
    out[ok] = num[ok] / den[ok]
    return out


def gaussian_blur(image, radius: float):
    """Convolve with a normalized Gaussian kernel of standard deviation ``radius`` px.

    Masked pixels (and the region outside the frame) are excluded by
    renormalizing with the blurred mask. Accepts an :class:`AbsorptionImage`
    or a plain array and returns the same type.
    """
    if isinstance(image, AbsorptionImage):
        out = _blur_array(image.values, radius, image.mask)
        return AbsorptionImage(out, image.mask.copy(), dict(image.provenance), image.filter_radii, image.sigma)
    return _blur_array(image, radius, None)


def bandpass_filter(image, r_high: float = 1.0, r_low: float = 20.0):
    """Difference of Gaussian blurs: removes pixel noise and slow background."""
    if not (0 < r_high < r_low):
        raise ValueError(f"bandpass needs 0 < r_high < r_low, got {r_high}, {r_low}")
    if isinstance(image, AbsorptionImage):
        if image.filter_radii is not None:
            raise AnalysisError("image is already filtered")
        out = gaussian_blur(image, r_high).values - gaussian_blur(image, r_low).values
        prov = dict(image.provenance)
        prov["bandpass"] = [r_high, r_low]
        return AbsorptionImage(out, image.mask.copy(), prov, (float(r_high), float(r_low)), image.sigma, image)
    return gaussian_blur(image, r_high) - gaussian_blur(image, r_low)


def _bandpass_adjoint(v: np.ndarray, mask: np.ndarray, radii) -> np.ndarray:
    """Transpose of the masked, renormalized bandpass operator applied to ``v``."""
    weight = mask.astype(float)
    out = np.zeros_like(v)
    for radius, sign in ((radii[0], 1.0), (radii[1], -1.0)):
        den = ndimage.gaussian_filter(weight, radius, mode="constant", cval=0.0)
        scaled = np.divide(v, den, out=np.zeros_like(v), where=den > 1e-12)
        out += sign * ndimage.gaussian_filter(scaled, radius, mode="constant", cval=0.0)
    return out * weight


def _filtered_covariance(image: AbsorptionImage, coords, p) -> np.ndarray:
    """Sandwich covariance of a fit to a bandpassed map.

    The filter correlates the pixel noise, so the plain residual-scaled
    covariance underestimates the errors. The per-pixel noise scale is taken
    from the unfiltered map's residuals about the fitted spot.
    """
    raw = image.unfiltered
    mask = image.mask
    sel = mask.ravel()
    sig_rel = (raw.sigma if raw.sigma is not None else np.ones(mask.shape)).ravel()[sel]
    w = 1.0 / sig_rel**2
    p0 = np.array(p, dtype=float)
    p0[5] = 0.0
    r = raw.values.ravel()[sel] - gaussian2d(coords, p0, None)
    off = np.sum(w * r) / np.sum(w)
    scale2 = np.sum(w * (r - off) ** 2) / (r.size - 7)
    jac = gaussian2d_jacobian(coords, p, image.filter_radii)
    hess = jac.T @ (w[:, None] * jac)
    q = np.empty_like(jac)
    for k in range(jac.shape[1]):
        v = np.zeros(mask.shape)
        v[mask] = w * jac[:, k]
        q[:, k] = _bandpass_adjoint(v, mask, image.filter_radii)[mask]
    meat = q.T @ ((scale2 * sig_rel**2)[:, None] * q)
    hinv = np.linalg.inv(hess)
    cov = hinv @ meat @ hinv
    return 0.5 * (cov + cov.T)


def _components(filter_radii):
    """(added variance, sign) of each Gaussian term in the model."""
    if filter_radii is None:
        return ((0.0, 1.0),)
    h, lo = filter_radii
    return ((h * h, 1.0), (lo * lo, -1.0))


def gaussian2d(coords: np.ndarray, p, filter_radii=None) -> np.ndarray:
    """Evaluate the (optionally bandpass-filtered) 2D Gaussian at ``coords`` (N, 2) = (col, row)."""
    a, x0, y0, wx, wy, off = p
    sx, sy = wx / FWHM_PER_SIGMA, wy / FWHM_PER_SIGMA
    dx = coords[:, 0] - x0
    dy = coords[:, 1] - y0
    out = np.full(dx.shape, float(off))
    for var, sign in _components(filter_radii):
        vx, vy = sx * sx + var, sy * sy + var
        scale = sx * sy / math.sqrt(vx * vy)
        out += sign * a * scale * np.exp(-0.5 * (dx * dx / vx + dy * dy / vy))
    return out


def gaussian2d_jacobian(coords: np.ndarray, p, filter_radii=None) -> np.ndarray:
    a, x0, y0, wx, wy, off = p
    sx, sy = wx / FWHM_PER_SIGMA, wy / FWHM_PER_SIGMA
    dx = coords[:, 0] - x0
    dy = coords[:, 1] - y0
    jac = np.zeros((dx.size, 6))
    jac[:, 5] = 1.0
    for var, sign in _components(filter_radii):
        vx, vy = sx * sx + var, sy * sy + var
        scale = sx * sy / math.sqrt(vx * vy)
        e = sign * scale * np.exp(-0.5 * (dx * dx / vx + dy * dy / vy))
        jac[:, 0] += e
        jac[:, 1] += a * e * dx / vx
        jac[:, 2] += a * e * dy / vy
        # d/dsx of scale*exp(...) = scale*exp * (1/sx - sx/vx + dx^2 sx / vx^2)
        jac[:, 3] += a * e * (1.0 / sx - sx / vx + dx * dx * sx / vx**2) / FWHM_PER_SIGMA
        jac[:, 4] += a * e * (1.0 / sy - sy / vy + dy * dy * sy / vy**2) / FWHM_PER_SIGMA
    return jac


def gaussian2d_model(filter_radii=None) -> Model:
    return Model(
        func=lambda c, p: gaussian2d(c, p, filter_radii),
        jac=lambda c, p: gaussian2d_jacobian(c, p, filter_radii),
        names=PARAM_NAMES,
    )


@dataclass
class GaussianFit2D:
    """2D Gaussian fit of an absorption map; lengths are in binned pixels."""

    amplitude: float
    center_x: float
    center_y: float
    fwhm_x: float
    fwhm_y: float
    offset: float
    uncertainties: dict
    covariance: np.ndarray
    converged: bool
    residual_rms: float
    message: str = ""
    iterations: int = 0
    pixel_size: float | None = None
    filter_radii: tuple[float, float] | None = None

    @property
    def params(self) -> np.ndarray:
        return np.array([self.amplitude, self.center_x, self.center_y, self.fwhm_x, self.fwhm_y, self.offset])

    @property
    def fwhm(self) -> float:
        """Geometric-mean FWHM in pixels."""
        return math.sqrt(self.fwhm_x * self.fwhm_y)

    def fwhm_m(self) -> tuple[float, float]:
        if self.pixel_size is None:
            raise AnalysisError("fit has no pixel-size calibration")
        return self.fwhm_x * self.pixel_size, self.fwhm_y * self.pixel_size

    def to_dict(self) -> dict:
        d = {name: float(v) for name, v in zip(PARAM_NAMES, self.params)}
        d.update(
            uncertainties={k: float(v) for k, v in self.uncertainties.items()},
            covariance=np.asarray(self.covariance).tolist(),
            converged=self.converged,
            residual_rms=self.residual_rms,
            message=self.message,
            iterations=self.iterations,
            pixel_size=self.pixel_size,
            filter_radii=list(self.filter_radii) if self.filter_radii else None,
        )
        return d


def _pixel_coords(shape):
    rows, cols = np.indices(shape)
    return np.column_stack([cols.ravel(), rows.ravel()]).astype(float)


def initial_guess(image: AbsorptionImage) -> np.ndarray:
    """Derivative-free starting point: extremum, half-max second moments, border median."""
    v, mask = image.values, image.mask
    h, w = v.shape
    border = np.zeros_like(mask)
    border[:3, :] = border[-3:, :] = border[:, :3] = border[:, -3:] = True
    ring = mask & border
    base = float(np.median(v[ring])) if ring.any() else float(np.median(v[mask]))
    smooth = v if image.filter_radii is not None else _blur_array(v, 1.0, mask)
    dev = np.where(mask, smooth - base, 0.0)
    noise = image.sigma if image.sigma is not None else np.ones_like(v)
    # locate on a significance map smoothed to roughly the spot scale
    detect = _blur_array(np.where(mask, (v - base) / noise, 0.0), DETECT_RADIUS_PX, mask)
    iy, ix = np.unravel_index(np.argmax(np.abs(np.where(mask, detect, 0.0))), dev.shape)
    peak = dev[iy, ix]
    sign = 1.0 if peak >= 0 else -1.0
    r = 10
    ys = slice(max(iy - r, 0), min(iy + r + 1, h))
    xs = slice(max(ix - r, 0), min(ix + r + 1, w))
    win = sign * dev[ys, xs]
    wts = np.where(win >= 0.5 * abs(peak), win, 0.0)
    yy, xx = np.mgrid[ys, xs]
    total = wts.sum()
    if total > 0:
        mx = (wts * xx).sum() / total
        my = (wts * yy).sum() / total
        vx = (wts * (xx - mx) ** 2).sum() / total
        vy = (wts * (yy - my) ** 2).sum() / total
    else:
        mx, my, vx, vy = ix, iy, 1.0, 1.0
    size = max(h, w)
    fwhm_x = float(np.clip(FWHM_PER_SIGMA * math.sqrt(vx / _HALF_MAX_MOMENT), 2.0, size / 4))
    fwhm_y = float(np.clip(FWHM_PER_SIGMA * math.sqrt(vy / _HALF_MAX_MOMENT), 2.0, size / 4))
    amp = float(peak)
    if image.filter_radii is not None:
        # undo the peak attenuation of the filter for the initial width
        ref = gaussian2d(np.array([[0.0, 0.0]]), [1.0, 0.0, 0.0, fwhm_x, fwhm_y, 0.0], image.filter_radii)[0]
        if ref > 0.05:
            amp /= ref
    return np.array([amp, float(mx), float(my), fwhm_x, fwhm_y, base])


def fit_gaussian_2d(image: AbsorptionImage, init=None, max_iter: int = 200) -> GaussianFit2D:
    """Least-squares 2D Gaussian fit over all unmasked pixels.

    Pixels are weighted by the image's relative noise map when present;
    uncertainties come from the covariance scaled by the residual variance.
    ``init`` may be a :class:`GaussianFit2D` or a parameter vector. Fits that
    end with a width below one pixel, a centre outside the frame, or a
    singular covariance are returned with ``converged=False``.
    """
    mask = image.mask
    npix = int(mask.sum())
    if npix <= 7:
        raise AnalysisError(f"only {npix} unmasked pixels; need more than 7")
    h, w = image.shape
    coords = _pixel_coords(image.shape)[mask.ravel()]
    data = image.values.ravel()[mask.ravel()]
    weights = 1.0 if image.sigma is None else image.sigma.ravel()[mask.ravel()]
    if init is None:
        p0 = initial_guess(image)
    elif isinstance(init, GaussianFit2D):
        p0 = init.params
    else:
        p0 = np.asarray(init, dtype=float)
    size = float(max(h, w))
    lo = [-np.inf, -0.5, -0.5, 0.3, 0.3, -np.inf]
    hi = [np.inf, w - 0.5, h - 0.5, size, size, np.inf]
    model = gaussian2d_model(image.filter_radii)
    res: FitResult = least_squares(
        model, coords, data, weights, p0, bounds=(lo, hi), absolute_sigma=False, max_iter=max_iter
    )
    p = res.values
    resid = data - model(coords, p)
    converged, message = res.converged, res.message
    cov, errs = res.covariance, dict(res.uncertainties)
    if converged and image.filter_radii is not None and image.unfiltered is not None:
        cov = _filtered_covariance(image, coords, p)
        errs = dict(zip(PARAM_NAMES, map(float, np.sqrt(np.clip(np.diag(cov), 0, None)))))
    if converged:
        if min(p[3], p[4]) < MIN_FWHM_PX:
            converged, message = False, f"spot narrower than {MIN_FWHM_PX} px"
        elif max(p[3], p[4]) >= size * 0.999:
            converged, message = False, "spot width ran to the frame size"
        elif not (0 <= p[1] <= w - 1 and 0 <= p[2] <= h - 1):
            converged, message = False, "centre outside the frame"
    return GaussianFit2D(
        *map(float, p),
        uncertainties=errs,
        covariance=cov,
        converged=converged,
        residual_rms=float(np.sqrt(np.mean(resid**2))),
        message=message,
        iterations=res.iterations,
        pixel_size=image.pixel_size,
        filter_radii=image.filter_radii,
    )


def image_snr(image: AbsorptionImage, fit: GaussianFit2D) -> float:
    """Fitted amplitude over the RMS fit residual in an annulus 2-4 FWHM from the centre."""
    if not fit.converged:
        raise AnalysisError("SNR needs a converged fit")
    h, w = image.shape
    rows, cols = np.indices(image.shape)
    r = np.hypot(cols - fit.center_x, rows - fit.center_y)
    r_in, r_out = 2.0 * fit.fwhm, 4.0 * fit.fwhm
    ring = (r >= r_in) & (r <= r_out)
    nominal = math.pi * (r_out**2 - r_in**2)
    sel = ring & image.mask
    if sel.sum() < 0.5 * nominal or sel.sum() < 10:
        raise AnalysisError("SNR annulus falls outside the valid image")
    coords = np.column_stack([cols[sel], rows[sel]]).astype(float)
    resid = image.values[sel] - gaussian2d(coords, fit.params, image.filter_radii)
    rms = float(np.sqrt(np.mean(resid**2)))
    return abs(fit.amplitude) / rms if rms > 0 else math.inf


def _calibration(fit: GaussianFit2D, pixel_size):
    px = pixel_size if pixel_size is not None else fit.pixel_size
    if px is None:
        raise AnalysisError("missing pixel-size calibration")
    return px


def _effective_sigmas(fit: GaussianFit2D, px: float, beam_fwhm: float | None):
    """Spot sigmas (m) of the removed intensity.

    The contrast map is normalized by the local illumination, so under a
    Gaussian beam of FWHM ``w`` centred on the spot it is wider than the
    removed-intensity profile: 1/s^2 = 1/s_map^2 + 8 ln2 / w^2.
    """
    sx = fit.fwhm_x * px / FWHM_PER_SIGMA
    sy = fit.fwhm_y * px / FWHM_PER_SIGMA
    if beam_fwhm is None:
        return sx, sy, sx, sy
    k = 8.0 * math.log(2.0) / beam_fwhm**2
    return sx, sy, 1.0 / math.sqrt(1.0 / sx**2 + k), 1.0 / math.sqrt(1.0 / sy**2 + k)


def diverted_power(
    fit: GaussianFit2D, peak_intensity: float, pixel_size: float | None = None, beam_fwhm: float | None = None
) -> float:
    """Power (W) removed by the absorber: contrast x spot area (2 pi sx sy) x intensity at the ion.

    With ``beam_fwhm`` (m) the spot area is corrected for the beam curvature
    folded into the normalized map (beam assumed centred on the ion).
    """
    px = _calibration(fit, pixel_size)
    _, _, ex, ey = _effective_sigmas(fit, px, beam_fwhm)
    return fit.amplitude * 2.0 * math.pi * ex * ey * peak_intensity


def diverted_power_error(
    fit: GaussianFit2D, peak_intensity: float, pixel_size: float | None = None, beam_fwhm: float | None = None
) -> float:
    """1-sigma uncertainty of :func:`diverted_power` from the fit covariance."""
    px = _calibration(fit, pixel_size)
    sx, sy, ex, ey = _effective_sigmas(fit, px, beam_fwhm)
    p = diverted_power(fit, peak_intensity, px, beam_fwhm)
    grad = np.zeros(6)
    grad[0] = 2.0 * math.pi * ex * ey * peak_intensity
    grad[3] = p / fit.fwhm_x * (ex / sx) ** 2
    grad[4] = p / fit.fwhm_y * (ey / sy) ** 2
    var = float(grad @ np.asarray(fit.covariance) @ grad)
    return math.sqrt(max(var, 0.0))


@dataclass
class PairAnalysis:
    contrast_map: AbsorptionImage
    analyzed: AbsorptionImage
    fit: GaussianFit2D
    raw_fit: GaussianFit2D
    snr: float
    flags: list[str]


def analyze_pair(
    signal: Frame,
    reference: Frame,
    use_filter: bool = True,
    r_high: float = 1.0,
    r_low: float = 20.0,
    floor: float = DEFAULT_FLOOR,
    init=None,
) -> PairAnalysis:
    """Full inverse pipeline for one frame pair.

    The contrast fit comes from the bandpassed map (unless ``use_filter`` is
    off); the SNR is measured on the unfiltered map, whose residuals carry
    the per-pixel photon noise. ``init`` seeds the contrast fit.
    """
    cmap = normalize_difference(signal, reference, floor)
    analyzed = bandpass_filter(cmap, r_high, r_low) if use_filter else cmap
    fit = fit_gaussian_2d(analyzed, init=init)
    flags = []
    raw_fit = fit if not use_filter else fit_gaussian_2d(cmap, init=_raw_init(fit, cmap))
    snr = math.nan
    if raw_fit.converged:
        try:
            snr = image_snr(cmap, raw_fit)
        except AnalysisError:
            flags.append("snr_unavailable")
    if not fit.converged:
        flags.append("not_converged")
    elif fit.amplitude < 0:
        flags.append("negative_amplitude")
    if signal.metadata.get("clipped") or reference.metadata.get("clipped"):
        flags.append("clipped")
    return PairAnalysis(cmap, analyzed, fit, raw_fit, snr, flags)


def _raw_init(fit: GaussianFit2D, cmap: AbsorptionImage):
    if not fit.converged:
        return None
    p = fit.params.copy()
    p[5] = float(np.median(cmap.values[cmap.mask]))
    return p
