"""Frequency-domain tools: orthonormal 2-D DCT, quarter-annulus coefficient
masks (manipulation modes 8-12), and radially averaged power spectral
density.

Mask geometry lives on the coefficient grid: radius is the index distance
sqrt(u^2 + v^2) from the DC corner, and radius_max is the distance to the
farthest index (H-1, W-1). A mask removes every coefficient whose radius
falls in [inner, outer); "mask after r" is the unbounded band [r, inf).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import fft as _fft

from .image import as_image, clip_unit

PSD_FLOOR = 1e-12


def dct2(image) -> np.ndarray:
    """Separable orthonormal DCT-II. coeff[0,0] = sum(pixels)/sqrt(H*W)."""
    img = as_image(image)
    if not np.all(np.isfinite(img)):
        raise ValueError("image contains non-finite values")
    return _fft.dctn(img, type=2, norm="ortho")


def idct2(coeffs) -> np.ndarray:
    """Exact inverse of dct2. Output is not clipped."""
    c = as_image(coeffs, "coeffs")
    return _fft.idctn(c, type=2, norm="ortho")


@dataclass(frozen=True)
class FrequencyMaskSpec:
    """Quarter-annulus band to remove, as fractions of radius_max.

    outer_frac = math.inf encodes the unbounded "after the inner radius"
    masking type.
    """

    inner_frac: float
    outer_frac: float

    def __post_init__(self):
        if self.inner_frac < 0:
            raise ValueError(f"inner_frac must be >= 0, got {self.inner_frac}")
        if not self.inner_frac < self.outer_frac:
            raise ValueError(
                f"inner_frac must be < outer_frac, got [{self.inner_frac}, {self.outer_frac})"
            )


def radius_max(height: int, width: int) -> float:
    return math.hypot(height - 1, width - 1)


def radial_mask(height: int, width: int, spec: FrequencyMaskSpec) -> np.ndarray:
    """Binary keep-mask over coefficient indices (1 keep, 0 removed).

    An index (u, v) is removed when inner <= sqrt(u^2+v^2) < outer, with
    inner/outer = frac * radius_max. Inner bound inclusive, outer exclusive.
    """
    if height < 1 or width < 1:
        raise ValueError("mask dimensions must be positive")
    rmax = radius_max(height, width)
    u = np.arange(height, dtype=np.float64)[:, None]
    v = np.arange(width, dtype=np.float64)[None, :]
    r = np.hypot(u, v)
    inner = spec.inner_frac * rmax
    outer = spec.outer_frac * rmax  # inf stays inf
    removed = (r >= inner) & (r < outer)
    return np.where(removed, 0.0, 1.0)


# Mode id -> annulus, paper-fixed: three after-radius masks for the high
# frequencies and two mid-to-high bands.
FREQ_MODE_SPECS: dict[int, FrequencyMaskSpec] = {
    8: FrequencyMaskSpec(0.1, math.inf),
    9: FrequencyMaskSpec(0.3, math.inf),
    10: FrequencyMaskSpec(0.5, math.inf),
    11: FrequencyMaskSpec(0.4, 0.5),
    12: FrequencyMaskSpec(0.5, 0.9),
}


def apply_frequency_mode(image, mode) -> np.ndarray:
    """Mask the DCT coefficients for one frequency mode and invert.

    The result is clipped to [0, 1]: removing coefficients can push pixels
    outside the unit range, and masked images feed straight into denoisers.
    """
    mode_id = getattr(mode, "id", mode)
    spec = FREQ_MODE_SPECS.get(mode_id)
    if spec is None:
        raise ValueError(f"mode {mode_id} is not a frequency mode (8..12)")
    img = as_image(image)
    coeffs = dct2(img) * radial_mask(img.shape[0], img.shape[1], spec)
    return clip_unit(idct2(coeffs))


@dataclass
class PsdCurve:
    """Radially averaged power spectrum: bin-center frequencies and mean
    log-power per bin in dB."""

    radii: np.ndarray
    power_db: np.ndarray

    def rows(self):
        return list(zip(self.radii.tolist(), self.power_db.tolist()))


def psd(images: list, n_bins: int = 32) -> PsdCurve:
    """Radially averaged Fourier power spectral density over an image list.

    Per image the centered 2-D power |F(u,v)|^2 / (H*W) is binned by
    normalized spatial frequency (cycles/pixel); bins are averaged over all
    images and reported as 10*log10(mean + 1e-12).
    """
    if len(images) == 0:
        raise ValueError("psd needs at least one image")
    if n_bins < 1:
        raise ValueError("n_bins must be >= 1")
    first = as_image(images[0], "images[0]")
    h, w = first.shape

    fy = np.fft.fftshift(np.fft.fftfreq(h))[:, None]
    fx = np.fft.fftshift(np.fft.fftfreq(w))[None, :]
    r = np.hypot(fy, fx)
    edges = np.linspace(0.0, float(r.max()), n_bins + 1)
    # Highest frequency lands in the last bin, not a phantom n_bins-th one.
    idx = np.minimum(np.digitize(r.ravel(), edges[1:-1]), n_bins - 1)
    counts = np.bincount(idx, minlength=n_bins).astype(np.float64)
    counts = np.maximum(counts, 1.0)  # empty annuli report the floor, not NaN

    total = np.zeros(n_bins, dtype=np.float64)
    for i, img in enumerate(images):
        img = as_image(img, f"images[{i}]")
        if img.shape != (h, w):
            raise ValueError(f"images[{i}] has shape {img.shape}, expected {(h, w)}")
        power = np.abs(np.fft.fftshift(np.fft.fft2(img))) ** 2 / (h * w)
        total += np.bincount(idx, weights=power.ravel(), minlength=n_bins)
    mean_power = total / (counts * len(images))
    centers = 0.5 * (edges[:-1] + edges[1:])
    return PsdCurve(radii=centers, power_db=10.0 * np.log10(mean_power + PSD_FLOOR))
