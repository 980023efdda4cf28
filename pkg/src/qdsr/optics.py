"""PSF rendering and synthesis of paired ground-truth / camera frames."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import ndimage, optimize, special

from .numerics import bin_sum, convolve_fft, poisson_sample

GAUSS_FWHM_PER_SIGMA = 2.0 * math.sqrt(2.0 * math.log(2.0))


def _airy(v):
    v = np.asarray(v, dtype=np.float64)
    out = np.ones_like(v)
    nz = v != 0
    out[nz] = (2.0 * special.j1(v[nz]) / v[nz]) ** 2
    return out


# argument of the first zero of J1, and where [2 J1(v)/v]^2 drops to one half
AIRY_FIRST_ZERO = float(special.jn_zeros(1, 1)[0])
AIRY_HALF_MAX = float(optimize.brentq(lambda v: _airy(v) - 0.5, 1.0, 2.5, xtol=1e-14))
# first-zero radius over FWHM for an Airy disc (about 1.18533)
AIRY_ZERO_PER_FWHM = AIRY_FIRST_ZERO / (2.0 * AIRY_HALF_MAX)

PSF_KINDS = ("gaussian", "airy")


@dataclass(frozen=True)
class PsfSpec:
    kind: str = "gaussian"
    fwhm_px: float = 16.0
    squeeze: float = 1.0
    axis_angle: float = 0.0

    def __post_init__(self):
        if self.kind not in PSF_KINDS:
            raise ValueError(f"unknown PSF kind {self.kind!r}; expected one of {PSF_KINDS}")
        if not self.fwhm_px > 0:
            raise ValueError("fwhm_px must be positive")
        if not 0 < self.squeeze <= 1:
            raise ValueError("squeeze must lie in (0, 1]")


@dataclass(frozen=True)
class Emitter:
    x: float  # high-res column
    y: float  # high-res row
    mean_photons: float

    @property
    def pixel(self) -> tuple[int, int]:
        """Nearest high-res pixel as ``(row, col)``."""
        return int(math.floor(self.y + 0.5)), int(math.floor(self.x + 0.5))


@dataclass
class EmitterSet:
    emitters: list[Emitter] = field(default_factory=list)
    hi_size: int = 200
    lo_size: int = 50

    def __len__(self):
        return len(self.emitters)

    def __iter__(self):
        return iter(self.emitters)

    def positions(self) -> np.ndarray:
        """``(n, 2)`` array of deposited pixel positions as ``(x, y)``."""
        return np.array([(e.pixel[1], e.pixel[0]) for e in self.emitters], dtype=float).reshape(-1, 2)


@dataclass(frozen=True)
class SceneConfig:
    hi_size: int = 200
    lo_size: int = 50
    n_emitters_range: tuple[int, int] = (1, 15)
    fwhm_range: tuple[float, float] = (8.0, 40.0)
    intensity_range: tuple[float, float] = (1.0, 1e4)
    background_range: tuple[float, float] = (1.0, 100.0)
    squeeze_min: float = 0.6
    psf_kinds: tuple[str, ...] = PSF_KINDS

    def __post_init__(self):
        for name in ("n_emitters_range", "fwhm_range", "intensity_range", "background_range"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        object.__setattr__(self, "psf_kinds", tuple(self.psf_kinds))
        if self.hi_size != 4 * self.lo_size:
            raise ValueError("hi_size must be 4 x lo_size")
        lo_n, hi_n = self.n_emitters_range
        if not 1 <= lo_n <= hi_n:
            raise ValueError("n_emitters_range must satisfy 1 <= min <= max")
        for name in ("fwhm_range", "intensity_range", "background_range"):
            a, b = getattr(self, name)
            if not 0 < a <= b:
                raise ValueError(f"{name} must be positive and ordered, got {(a, b)}")
        if not 0 < self.squeeze_min <= 1:
            raise ValueError("squeeze_min must lie in (0, 1]")
        if not self.psf_kinds or any(k not in PSF_KINDS for k in self.psf_kinds):
            raise ValueError(f"psf_kinds must be a non-empty subset of {PSF_KINDS}")

    @property
    def factor(self) -> int:
        return self.hi_size // self.lo_size

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}


def default_support(fwhm_px: float) -> int:
    n = math.ceil(3.0 * fwhm_px)
    return n if n % 2 else n + 1


def _stretched_radius(support: int, squeeze: float, angle: float) -> np.ndarray:
    half = (support - 1) // 2
    d = np.arange(-half, half + 1, dtype=np.float64)
    dy, dx = np.meshgrid(d, d, indexing="ij")
    c, s = math.cos(angle), math.sin(angle)
    along = (dx * c + dy * s) / squeeze
    across = -dx * s + dy * c
    return np.hypot(along, across)


def render_psf(spec: PsfSpec, support: int | None = None) -> np.ndarray:
    """Render a unit-sum PSF kernel sampled at pixel centers.

    The squeeze narrows the profile along ``axis_angle`` (measured from the
    column axis towards the row axis) to ``squeeze * fwhm_px``.
    """
    if support is None:
        support = default_support(spec.fwhm_px)
    support = int(support)
    if support % 2 == 0:
        raise ValueError(f"PSF support must be odd, got {support}")
    half = (support - 1) // 2
    if spec.kind == "airy" and half < AIRY_ZERO_PER_FWHM * spec.fwhm_px:
        raise ValueError(
            f"support {support} cannot contain the first Airy zero at radius "
            f"{AIRY_ZERO_PER_FWHM * spec.fwhm_px:.2f} px")
    r = _stretched_radius(support, spec.squeeze, spec.axis_angle)
    if spec.kind == "gaussian":
        sigma = spec.fwhm_px / GAUSS_FWHM_PER_SIGMA
        k = np.exp(-0.5 * (r / sigma) ** 2)
    else:
        k = _airy(r * (2.0 * AIRY_HALF_MAX / spec.fwhm_px))
    return k / k.sum()


def render_blend_psf(fwhm_px: float, airy_weight: float, squeeze: float = 1.0,
                     axis_angle: float = 0.0, support: int | None = None) -> np.ndarray:
    """Unit-sum mixture of a Gaussian and an Airy kernel of the same FWHM.

    Only used to generate held-out test PSFs lying between the two families.
    """
    if not 0 <= airy_weight <= 1:
        raise ValueError("airy_weight must lie in [0, 1]")
    support = support or default_support(fwhm_px)
    g = render_psf(PsfSpec("gaussian", fwhm_px, squeeze, axis_angle), support)
    a = render_psf(PsfSpec("airy", fwhm_px, squeeze, axis_angle), support)
    k = (1.0 - airy_weight) * g + airy_weight * a
    return k / k.sum()


def measure_fwhm(kernel, angle: float = 0.0, step: float = 0.005) -> float:
    """FWHM of a centered kernel along ``angle``, from a cubic-spline profile."""
    kernel = np.asarray(kernel, dtype=np.float64)
    rows, cols = kernel.shape
    cy, cx = (rows - 1) / 2, (cols - 1) / 2
    t = np.arange(0.0, min(cy, cx), step)
    c, s = math.cos(angle), math.sin(angle)
    coeffs = ndimage.spline_filter(kernel, order=3)
    peak = kernel[int(cy), int(cx)]
    widths = []
    for sign in (1.0, -1.0):
        coords = np.stack([cy + sign * t * s, cx + sign * t * c])
        prof = ndimage.map_coordinates(coeffs, coords, order=3, prefilter=False)
        below = np.nonzero(prof < 0.5 * peak)[0]
        if below.size == 0:
            raise ValueError("profile never drops below half maximum inside the kernel")
        i = below[0]
        # linear interpolation between the bracketing fine samples
        frac = (prof[i - 1] - 0.5 * peak) / (prof[i - 1] - prof[i])
        widths.append(t[i - 1] + frac * step)
    return float(sum(widths))


def sample_scene(rng: np.random.Generator, config: SceneConfig = SceneConfig()):
    """Draw emitters, PSF parameters and background level for one scene.

    Returns ``(EmitterSet, PsfSpec, background_mean)``.
    """
    lo_n, hi_n = config.n_emitters_range
    n = int(rng.integers(lo_n, hi_n + 1))
    xy = rng.uniform(0.0, config.hi_size, size=(n, 2))
    log_lo, log_hi = np.log(config.intensity_range)
    photons = np.exp(rng.uniform(log_lo, log_hi, size=n))
    kind = config.psf_kinds[int(rng.integers(len(config.psf_kinds)))]
    fwhm = float(rng.uniform(*config.fwhm_range))
    squeeze = float(rng.uniform(config.squeeze_min, 1.0))
    angle = float(rng.uniform(0.0, math.pi))
    background = float(rng.uniform(*config.background_range))
    emitters = EmitterSet(
        [Emitter(float(x), float(y), float(p)) for (x, y), p in zip(xy, photons)],
        config.hi_size, config.lo_size)
    return emitters, PsfSpec(kind, fwhm, squeeze, angle), background


def rasterize_ground_truth(rng: np.random.Generator, emitters: EmitterSet) -> np.ndarray:
    """Point-emitter image: each emitter adds a Poisson photon count at its nearest pixel."""
    size = emitters.hi_size
    truth = np.zeros((size, size))
    for e in emitters:
        r, c = e.pixel
        r, c = min(max(r, 0), size - 1), min(max(c, 0), size - 1)
        truth[r, c] += poisson_sample(rng, e.mean_photons)
    return truth


def synthesize_frame(rng: np.random.Generator, truth, psf, background_mean: float,
                     factor: int = 4, noise: bool = True) -> np.ndarray:
    """Blur, bin and shot-noise a ground-truth grid into a camera frame.

    Poisson noise is applied to signal plus background jointly. ``noise=False``
    skips the sampling and returns the expected counts (a test hook).
    """
    if background_mean < 0:
        raise ValueError("background_mean must be non-negative")
    blurred = np.maximum(convolve_fft(truth, psf), 0.0)
    expected = bin_sum(blurred, factor) + background_mean
    if not noise:
        return expected
    return poisson_sample(rng, expected).astype(np.float64)
