"""Classical localization and the distance metrics used to check reconstructions."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import ndimage

from .optics import AIRY_ZERO_PER_FWHM, GAUSS_FWHM_PER_SIGMA, EmitterSet

MAD_TO_SIGMA = 1.4826


class NoBlinkingEvent(ValueError):
    """The two frames do not differ beyond the noise level."""


@dataclass(frozen=True)
class PixelCalibration:
    nm_per_hires_pixel: float

    def __post_init__(self):
        if not (math.isfinite(self.nm_per_hires_pixel) and self.nm_per_hires_pixel > 0):
            raise ValueError("nm_per_hires_pixel must be positive and finite")


@dataclass
class GaussFitResult:
    x0: float
    y0: float
    sigma_x: float
    sigma_y: float
    theta: float
    amplitude: float
    offset: float
    residual_norm: float
    converged: bool
    position_uncertainty: float
    iterations: int = 0

    @property
    def fwhm(self) -> float:
        """Geometric-mean FWHM of the fitted spot."""
        return GAUSS_FWHM_PER_SIGMA * math.sqrt(self.sigma_x * self.sigma_y)


@dataclass
class EmitterEstimate:
    x: float
    y: float
    mass: float
    support_radius: float


@dataclass
class LineFit:
    direction: np.ndarray
    point: np.ndarray
    mean_deviation: float
    deviations: np.ndarray
    unit: str = "px"


@dataclass
class MatchReport:
    pairs: list[tuple[int, int, float]] = field(default_factory=list)
    unmatched_estimates: list[int] = field(default_factory=list)
    unmatched_truth: list[int] = field(default_factory=list)
    unit: str = "px"

    @property
    def distances(self) -> np.ndarray:
        return np.array([d for _, _, d in self.pairs])

    @property
    def mean(self) -> float:
        return float(self.distances.mean()) if self.pairs else math.nan

    @property
    def max(self) -> float:
        return float(self.distances.max()) if self.pairs else math.nan


def lo_to_hi(coord, factor: int = 4):
    """Map a low-res pixel coordinate to the high-res grid it was binned from."""
    return factor * np.asarray(coord, dtype=float) + (factor - 1) / 2.0


def _gauss_model(q, xx, yy):
    x0, y0, sx, sy, th, amp, off = q
    c, s = math.cos(th), math.sin(th)
    dx, dy = xx - x0, yy - y0
    u = dx * c + dy * s
    v = -dx * s + dy * c
    e = np.exp(-0.5 * ((u / sx) ** 2 + (v / sy) ** 2))
    return amp * e + off, (e, u, v, c, s)


def _gauss_jacobian(q, parts):
    _, _, sx, sy, _, amp, _ = q
    e, u, v, c, s = parts
    ae = amp * e
    return np.stack([
        ae * (u * c / sx ** 2 - v * s / sy ** 2),
        ae * (u * s / sx ** 2 + v * c / sy ** 2),
        ae * u ** 2 / sx ** 3,
        ae * v ** 2 / sy ** 3,
        -ae * u * v * (1.0 / sx ** 2 - 1.0 / sy ** 2),
        e,
        np.ones_like(e),
    ], axis=1)


def _initial_guess(data, xx, yy):
    offset = float(np.median(np.concatenate(
        [data[0], data[-1], data[1:-1, 0], data[1:-1, -1]])))
    signal = np.clip(data - offset, 0.0, None)
    total = signal.sum()
    if total <= 0:
        signal = data - data.min()
        total = signal.sum()
    x0 = float((signal * xx).sum() / total)
    y0 = float((signal * yy).sum() / total)
    var = float((signal * ((xx - x0) ** 2 + (yy - y0) ** 2)).sum() / total) / 2.0
    sigma = min(max(math.sqrt(max(var, 0.0)), 0.7), max(data.shape) / 3.0)
    amp = float(data.max() - offset)
    return np.array([x0, y0, sigma, sigma * 0.95, 0.0, amp, offset])


def fit_gaussian_2d(image, roi=None, init=None, max_iter: int = 200,
                    rtol: float = 1e-10) -> GaussFitResult:
    """Levenberg–Marquardt fit of a rotated asymmetric 2D Gaussian plus offset.

    ``roi`` is ``(row_start, row_stop, col_start, col_stop)``; coordinates in
    the result refer to the full image (``x`` = column, ``y`` = row). ``init``
    may give ``(x0, y0, sigma_x, sigma_y, theta, amplitude, offset)``.

    The result is canonicalized to ``sigma_x >= sigma_y`` and
    ``theta in [0, pi)``. ``position_uncertainty`` is the RMS of the x/y
    standard errors from a sandwich covariance estimate built on the
    per-pixel residuals.
    """
    image = np.asarray(image, dtype=np.float64)
    if roi is None:
        roi = (0, image.shape[0], 0, image.shape[1])
    r0, r1, c0, c1 = (int(v) for v in roi)
    if not (0 <= r0 < r1 <= image.shape[0] and 0 <= c0 < c1 <= image.shape[1]):
        raise ValueError(f"roi {roi} lies outside the image {image.shape}")
    if r1 - r0 < 7 or c1 - c0 < 7:
        raise ValueError(f"roi {roi} is smaller than 7x7 pixels")
    data = image[r0:r1, c0:c1]
    if np.ptp(data) == 0:
        raise ValueError("roi is constant; nothing to fit")
    yy, xx = np.mgrid[r0:r1, c0:c1].astype(np.float64)
    obs = data.ravel()
    xx, yy = xx.ravel(), yy.ravel()

    q = np.asarray(init, dtype=float) if init is not None else _initial_guess(
        data, xx.reshape(data.shape), yy.reshape(data.shape))
    model, parts = _gauss_model(q, xx, yy)
    cost = float(np.sum((model - obs) ** 2))
    start_cost = cost
    lam = 1e-3
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        jac = _gauss_jacobian(q, parts)
        resid = obs - model
        jtj = jac.T @ jac
        jtr = jac.T @ resid
        improved = False
        while lam < 1e12:
            a = jtj + lam * np.diag(np.maximum(np.diag(jtj), 1e-12))
            try:
                step = np.linalg.solve(a, jtr)
            except np.linalg.LinAlgError:
                lam *= 10.0
                continue
            trial = q + step
            trial[2:4] = np.maximum(np.abs(trial[2:4]), 1e-6)
            t_model, t_parts = _gauss_model(trial, xx, yy)
            t_cost = float(np.sum((t_model - obs) ** 2))
            if t_cost < cost:
                improved = True
                break
            lam *= 10.0
        if not improved:
            # no downhill step left at any damping: a stationary point
            converged = True
            break
        rel = (cost - t_cost) / max(cost, 1e-300)
        q, model, parts, cost = trial, t_model, t_parts, t_cost
        lam = max(lam / 10.0, 1e-12)
        if rel < rtol:
            converged = True
            break
    converged = converged and cost <= start_cost

    # heteroscedasticity-consistent (sandwich) covariance: shot noise makes the
    # residual variance grow with the signal, so a single pooled variance is biased
    jac = _gauss_jacobian(q, parts)
    resid = obs - model
    bread = np.linalg.pinv(jac.T @ jac)
    meat = (jac * (resid ** 2)[:, None]).T @ jac
    cov = bread @ meat @ bread * (obs.size / max(obs.size - q.size, 1))
    pos_unc = math.sqrt(max((cov[0, 0] + cov[1, 1]) / 2.0, 0.0))

    x0, y0, sx, sy, th, amp, off = (float(v) for v in q)
    sx, sy = abs(sx), abs(sy)
    if sx < sy:
        sx, sy = sy, sx
        th += math.pi / 2
    th = th % math.pi
    return GaussFitResult(x0, y0, sx, sy, th, amp, off, math.sqrt(cost), converged, pos_unc, it)


def find_peaks(recon, mass_threshold: float, min_separation_px: float,
               radius: float = 3.0) -> list[EmitterEstimate]:
    """Emitter centers in a reconstruction.

    Local maxima (3x3 neighbourhood, not flat) whose value exceeds ``mass_threshold`` are
    taken brightest first and kept if at least ``min_separation_px`` from every
    kept peak. Each is refined to the intensity-weighted centroid of the disc of
    ``radius`` pixels around it, whose sum is reported as the mass. Results are
    sorted by mass, largest first.
    """
    recon = np.asarray(recon, dtype=np.float64)
    local_max = recon >= ndimage.maximum_filter(recon, size=3, mode="constant", cval=-np.inf)
    # flat plateaus (a uniform map in particular) hold no peak
    local_max &= recon > ndimage.minimum_filter(recon, size=3, mode="nearest")
    cand = np.argwhere(local_max & (recon > mass_threshold))
    order = np.argsort(-recon[cand[:, 0], cand[:, 1]], kind="stable")
    kept: list[np.ndarray] = []
    for r, c in cand[order]:
        if all(math.hypot(r - kr, c - kc) >= min_separation_px for kr, kc in kept):
            kept.append(np.array([r, c]))
    rad = int(math.floor(radius))
    d = np.arange(-rad, rad + 1)
    dy, dx = np.meshgrid(d, d, indexing="ij")
    disc = dy ** 2 + dx ** 2 <= radius ** 2
    out = []
    for r, c in kept:
        rows, cols = r + dy[disc], c + dx[disc]
        ok = (rows >= 0) & (rows < recon.shape[0]) & (cols >= 0) & (cols < recon.shape[1])
        w = recon[rows[ok], cols[ok]]
        mass = float(w.sum())
        if mass > 0:
            x, y = float((w * cols[ok]).sum() / mass), float((w * rows[ok]).sum() / mass)
        else:
            x, y = float(c), float(r)
        out.append(EmitterEstimate(x, y, mass, radius))
    out.sort(key=lambda e: -e.mass)
    return out


def _as_points(obj) -> np.ndarray:
    if isinstance(obj, EmitterSet):
        return obj.positions()
    if len(obj) and isinstance(obj[0], EmitterEstimate):
        return np.array([(e.x, e.y) for e in obj], dtype=float)
    return np.asarray(obj, dtype=float).reshape(-1, 2)


def match_and_distances(estimates, truth, cal: PixelCalibration | None = None,
                        max_distance: float | None = None) -> MatchReport:
    """Greedy nearest-neighbour matching, globally smallest distance first.

    Positions are ``(x, y)`` in high-res pixels (or :class:`EmitterEstimate` /
    :class:`EmitterSet`). Distances are reported in nm when ``cal`` is given,
    otherwise in pixels. Pairs further apart than ``max_distance`` (pixels)
    are never matched.
    """
    est, tru = _as_points(estimates), _as_points(truth)
    d = np.hypot(est[:, None, 0] - tru[None, :, 0], est[:, None, 1] - tru[None, :, 1])
    flat = np.argsort(d, axis=None, kind="stable")
    used_e, used_t = set(), set()
    scale = cal.nm_per_hires_pixel if cal else 1.0
    report = MatchReport(unit="nm" if cal else "px")
    for k in flat:
        i, j = divmod(int(k), tru.shape[0])
        if i in used_e or j in used_t:
            continue
        if max_distance is not None and d[i, j] > max_distance:
            break
        used_e.add(i)
        used_t.add(j)
        report.pairs.append((i, j, float(d[i, j]) * scale))
    report.unmatched_estimates = [i for i in range(est.shape[0]) if i not in used_e]
    report.unmatched_truth = [j for j in range(tru.shape[0]) if j not in used_t]
    return report


def rayleigh_from_fwhm(fwhm: float, kind: str = "airy") -> float:
    """Rayleigh distance (peak to first Airy zero) for a PSF of the given FWHM.

    Gaussian PSFs have no zero; they use the Airy ratio by convention.
    """
    if kind not in ("gaussian", "airy"):
        raise ValueError(f"unknown PSF kind {kind!r}")
    if not fwhm > 0:
        raise ValueError("fwhm must be positive")
    return fwhm * AIRY_ZERO_PER_FWHM


def frame_difference_localize(frame_a, frame_b, threshold: float = 5.0,
                              fwhm_hint: float | None = None) -> GaussFitResult:
    """Localize the emitter that changed between two registered frames.

    Each pixel of ``a - b`` is scaled by its Poisson standard deviation
    ``sqrt(a + b + 1)``; an event needs the largest scaled difference to exceed
    ``threshold`` times the MAD-based noise scale of the scaled map. The blob
    is then fitted on the raw difference within a square ROI of about three
    PSF widths.
    """
    a = np.asarray(frame_a, dtype=np.float64)
    b = np.asarray(frame_b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"frames differ in shape: {a.shape} vs {b.shape}")
    diff = a - b
    z = diff / np.sqrt(np.abs(a) + np.abs(b) + 1.0)
    noise = MAD_TO_SIGMA * float(np.median(np.abs(z - np.median(z))))
    peak = float(np.max(np.abs(z)))
    if peak <= threshold * noise:
        raise NoBlinkingEvent(
            f"largest scaled difference {peak:.3g} is within {threshold} x noise {noise:.3g}")
    smooth = ndimage.gaussian_filter(z, 1.0, mode="constant")
    r, c = np.unravel_index(np.argmax(np.abs(smooth)), smooth.shape)
    if smooth[r, c] < 0:
        diff = -diff

    def window(half):
        half = max(int(half), 3)
        return (max(r - half, 0), min(r + half + 1, a.shape[0]),
                max(c - half, 0), min(c + half + 1, a.shape[1]))

    if fwhm_hint is None:
        first = fit_gaussian_2d(diff, window(6))
        fwhm_hint = min(max(first.fwhm, 1.0), max(a.shape) / 3.0)
    return fit_gaussian_2d(diff, window(math.ceil(1.5 * fwhm_hint)))


def line_fit_tls(points, cal: PixelCalibration | None = None) -> LineFit:
    """Total-least-squares line through ``(x, y)`` points (principal axis)."""
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    if pts.shape[0] < 3:
        raise ValueError("need at least 3 points")
    center = pts.mean(axis=0)
    centered = pts - center
    if np.allclose(centered, 0.0):
        raise ValueError("all points coincide; the line is undefined")
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    direction = vt[0] / np.linalg.norm(vt[0])
    normal = np.array([-direction[1], direction[0]])
    dev = np.abs(centered @ normal)
    # exact collinearity (every cross product with a chord vanishes) gives
    # exactly zero deviations instead of SVD round-off
    far = int(np.argmax(np.hypot(*(pts - pts[0]).T)))
    chord = pts[far] - pts[0]
    rel = pts - pts[0]
    if np.all(rel[:, 0] * chord[1] == rel[:, 1] * chord[0]):
        dev = np.zeros(pts.shape[0])
    scale = cal.nm_per_hires_pixel if cal else 1.0
    dev = dev * scale
    return LineFit(direction, center, float(dev.mean()), dev, "nm" if cal else "px")


def evaluate_reconstruction(recon, truth, cal: PixelCalibration | None = None,
                            rayleigh: float | None = None, mass_threshold: float | None = None,
                            min_separation_px: float = 4.0, max_distance: float | None = None,
                            fit_line: bool = False) -> dict:
    """Peak extraction, matching against ``truth`` and summary metrics.

    ``rayleigh`` is the Rayleigh distance in high-res pixels; when given, the
    report includes ``rayleigh_ratio`` = mean distance / Rayleigh distance.
    The default peak threshold is a tenth of the brightest pixel.
    """
    recon = np.asarray(recon, dtype=np.float64)
    if mass_threshold is None:
        mass_threshold = 0.1 * float(recon.max())
    peaks = find_peaks(recon, mass_threshold, min_separation_px)
    n_truth = len(_as_points(truth))
    report = {
        "unit": "nm" if cal else "px",
        "n_truth": n_truth,
        "n_estimates": len(peaks),
        "estimates": [asdict(p) for p in peaks],
    }
    if peaks and n_truth:
        m = match_and_distances(peaks, truth, cal, max_distance)
        report.update({
            "matched": len(m.pairs),
            "pairs": [list(p) for p in m.pairs],
            "unmatched_estimates": len(m.unmatched_estimates),
            "unmatched_truth": len(m.unmatched_truth),
            "mean_distance": m.mean,
            "max_distance": m.max,
        })
    else:
        report.update({"matched": 0, "pairs": [], "unmatched_estimates": len(peaks),
                       "unmatched_truth": n_truth, "mean_distance": None, "max_distance": None})
    if rayleigh is not None:
        scale = cal.nm_per_hires_pixel if cal else 1.0
        report["rayleigh"] = rayleigh * scale
        report["rayleigh_convention"] = "airy first zero / FWHM ratio"
        mean = report["mean_distance"]
        report["rayleigh_ratio"] = None if mean is None else mean / (rayleigh * scale)
    if fit_line and len(peaks) >= 3:
        line = line_fit_tls([(p.x, p.y) for p in peaks], cal)
        report["line_mean_deviation"] = line.mean_deviation
        report["line_direction"] = line.direction.tolist()
    report["failed"] = report["matched"] == 0 or report["unmatched_truth"] > 0
    return report


def write_report(report: dict, json_path=None, csv_path=None) -> None:
    if json_path is not None:
        with open(json_path, "w") as fh:
            json.dump(report, fh, indent=2)
    if csv_path is not None:
        with open(csv_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["estimate", "truth", f"distance_{report['unit']}"])
            for i, j, d in report.get("pairs", []):
                writer.writerow([i, j, repr(d)])
