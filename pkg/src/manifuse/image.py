"""Grayscale image primitives: noise synthesis, clipping, PSNR, patching,
removed-noise maps, and binary PGM I/O.

An image is a 2-D float64 array in (height, width) row-major layout with a
nominal [0, 1] intensity range. The range is only enforced by clip_unit;
noise synthesis deliberately returns unclipped values so the caller owns
the train/test clipping policy (training noise stays unclipped, test noise
is clipped before entering a denoiser).
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass

import numpy as np

SIGMA_MAX = 55.0


def as_image(data, name: str = "image") -> np.ndarray:
    """Coerce to a 2-D float64 array, rejecting anything else."""
    img = np.asarray(data, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {img.shape}")
    if img.size == 0:
        raise ValueError(f"{name} is empty")
    return img


def clip_unit(image) -> np.ndarray:
    """Clamp every value into [0, 1].

    Non-finite input is rejected with the offending pixel named, since a
    NaN silently clamped would poison every downstream metric.
    """
    img = as_image(image)
    if not np.all(np.isfinite(img)):
        r, c = np.argwhere(~np.isfinite(img))[0]
        raise ValueError(f"non-finite value {img[r, c]!r} at pixel ({r}, {c})")
    return np.clip(img, 0.0, 1.0)


def check_sigma(sigma: float) -> float:
    sigma = float(sigma)
    if not (0.0 <= sigma <= SIGMA_MAX):
        raise ValueError(f"sigma must be within [0, {SIGMA_MAX:g}], got {sigma}")
    return sigma


def add_awgn(image, sigma: float, seed: int, index: int = 0) -> np.ndarray:
    """Add white Gaussian noise with standard deviation sigma/255.

    The generator is counter-based (Philox) keyed by (seed, index), so a
    batch of images can be noised in any order, or in parallel, and still
    produce bit-identical results. Output is NOT clipped.
    """
    img = as_image(image)
    sigma = check_sigma(sigma)
    if seed < 0 or index < 0:
        raise ValueError("seed and index must be non-negative")
    rng = np.random.Generator(np.random.Philox(key=np.array([seed, index], dtype=np.uint64)))
    return img + rng.standard_normal(img.shape) * (sigma / 255.0)


def psnr(reference, test) -> float:
    """Peak signal-to-noise ratio in dB with peak 1 on unit-scale values.

    Identical images return math.inf rather than overflowing a log.
    """
    ref = as_image(reference, "reference")
    tst = as_image(test, "test")
    if ref.shape != tst.shape:
        raise ValueError(f"dimension mismatch: {ref.shape} vs {tst.shape}")
    mse = float(np.mean((ref - tst) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


@dataclass
class PatchGrid:
    """Fully-contained square patches cut from one image.

    origins are (row, col) offsets in row-major order; border regions that
    do not fit a whole patch are dropped, not padded.
    """

    patch_size: int
    stride: int
    patches: list[np.ndarray]
    origins: list[tuple[int, int]]

    def __len__(self) -> int:
        return len(self.patches)


def extract_patches(image, patch_size: int, stride: int) -> PatchGrid:
    img = as_image(image)
    h, w = img.shape
    patch_size = int(patch_size)
    stride = int(stride)
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    if patch_size < 1 or patch_size > min(h, w):
        raise ValueError(
            f"patch_size {patch_size} does not fit a {h}x{w} image"
        )
    patches: list[np.ndarray] = []
    origins: list[tuple[int, int]] = []
    for r in range(0, h - patch_size + 1, stride):
        for c in range(0, w - patch_size + 1, stride):
            patches.append(img[r : r + patch_size, c : c + patch_size].copy())
            origins.append((r, c))
    return PatchGrid(patch_size=patch_size, stride=stride, patches=patches, origins=origins)


def removed_noise_heatmap(noisy: list, denoised: list) -> np.ndarray:
    """Per-pixel mean of |noisy - denoised| over paired image lists."""
    if len(noisy) == 0 or len(noisy) != len(denoised):
        raise ValueError("need equally many noisy and denoised images, at least one pair")
    shape = np.shape(noisy[0])
    acc = np.zeros(shape, dtype=np.float64)
    for i, (n, d) in enumerate(zip(noisy, denoised)):
        n = as_image(n, f"noisy[{i}]")
        d = as_image(d, f"denoised[{i}]")
        if n.shape != shape or d.shape != shape:
            raise ValueError(f"mixed image sizes at pair {i}: {n.shape}/{d.shape} vs {shape}")
        acc += np.abs(n - d)
    return acc / len(noisy)


# ---------------------------------------------------------------------------
# Binary PGM (P5, maxval 255) with the linear mapping value = byte / 255.


def write_pgm(path, image) -> None:
    img = clip_unit(image)
    h, w = img.shape
    raster = np.rint(img * 255.0).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(raster.tobytes())


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    if not data.startswith(b"P5"):
        raise ValueError(f"{path}: not a binary PGM (P5) file")
    # Header: magic, width, height, maxval; '#' comments run to end of line.
    pos, fields = 2, []
    while len(fields) < 3:
        m = re.compile(rb"\s*(?:#[^\n]*\n)*\s*(\d+)").match(data, pos)
        if m is None:
            raise ValueError(f"{path}: malformed PGM header")
        fields.append(int(m.group(1)))
        pos = m.end()
    w, h, maxval = fields
    if maxval != 255:
        raise ValueError(f"{path}: only maxval 255 is supported, got {maxval}")
    pos += 1  # single whitespace byte between header and raster
    raster = data[pos : pos + w * h]
    if len(raster) != w * h:
        raise ValueError(f"{path}: truncated raster ({len(raster)} of {w * h} bytes)")
    return np.frombuffer(raster, dtype=np.uint8).reshape(h, w).astype(np.float64) / 255.0
