"""Bundled synthetic grayscale images.

Twenty-four deterministic 64x64 images: gradients, checkerboards, disks,
gratings, smoothed noise textures, and mixtures. They ship with the
package as 8-bit PGM files so every experiment and test runs without
downloads; regenerate_toy_files() rebuilds them bit for bit.
"""

from __future__ import annotations

import os
from importlib import resources

import numpy as np

from .freq import dct2, idct2
from .image import read_pgm, write_pgm

SIZE = 64


def _axes():
    y, x = np.mgrid[0:SIZE, 0:SIZE].astype(np.float64) / (SIZE - 1)
    return y, x


def _radius():
    y, x = _axes()
    return np.hypot(x - 0.5, y - 0.5)


def _checker(block: int, dy: int = 0, dx: int = 0) -> np.ndarray:
    i, j = np.mgrid[0:SIZE, 0:SIZE]
    return (((i + dy) // block + (j + dx) // block) % 2).astype(np.float64)


def _grating(freq_cycles: float, axis) -> np.ndarray:
    return 0.5 + 0.5 * np.sin(2.0 * np.pi * freq_cycles * axis)


def _smooth_texture(seed: int, cutoff: int) -> np.ndarray:
    """White noise with only its lowest cutoff x cutoff DCT block kept,
    stretched to fill [0,1]."""
    rng = np.random.default_rng([9000, seed])
    coeff = dct2(rng.standard_normal((SIZE, SIZE)))
    keep = np.zeros_like(coeff)
    keep[:cutoff, :cutoff] = coeff[:cutoff, :cutoff]
    img = idct2(keep)
    lo, hi = img.min(), img.max()
    return (img - lo) / (hi - lo)


def toy_images() -> list[tuple[str, np.ndarray]]:
    """All 24 images as (name, float image in [0,1]), in bundled order."""
    y, x = _axes()
    r = _radius()
    disk = np.where(r < 0.3, 0.85, 0.15)
    images = [
        ("gradient-h", x.copy()),
        ("gradient-v", y.copy()),
        ("gradient-diag", (x + y) / 2.0),
        ("gradient-radial", np.clip(r / r.max(), 0.0, 1.0)),
        ("checker-4", _checker(4)),
        ("checker-8", _checker(8)),
        ("checker-16", _checker(16)),
        ("checker-8-off", _checker(8, dy=3, dx=5)),
        ("disk", disk),
        ("disk-pair", np.where(
            (np.hypot(x - 0.3, y - 0.35) < 0.18)
            | (np.hypot(x - 0.7, y - 0.65) < 0.22), 0.9, 0.1)),
        ("annulus", np.where((r > 0.2) & (r < 0.35), 0.8, 0.2)),
        ("ellipse", np.where(((x - 0.5) / 0.4) ** 2 + ((y - 0.5) / 0.25) ** 2 < 1.0,
                             0.75, 0.25)),
        ("grating-h4", _grating(4, x)),
        ("grating-v7", _grating(7, y)),
        ("grating-d5", _grating(5, (x + y) / 2.0)),
        ("zoneplate", 0.5 + 0.5 * np.cos(60.0 * r * r)),
        ("texture-c6", _smooth_texture(1, 6)),
        ("texture-c10", _smooth_texture(2, 10)),
        ("texture-c16", _smooth_texture(3, 16)),
        ("texture-c24", _smooth_texture(4, 24)),
        ("mix-grad-grating", 0.5 * x + 0.5 * _grating(5, y)),
        ("mix-checker-disk", 0.5 * _checker(8) + 0.5 * disk),
        ("bars", ((np.mgrid[0:SIZE, 0:SIZE][1] // 5) % 3) / 2.0),
        ("steps", (np.mgrid[0:SIZE, 0:SIZE][0] // 8) / 7.0),
    ]
    return [(f"{i + 1:02d}-{name}", img) for i, (name, img) in enumerate(images)]


def _data_dir():
    return resources.files("manifuse").joinpath("data/toy")


def regenerate_toy_files(out_dir=None) -> list[str]:
    """Write all toy PGMs (to the package data dir by default)."""
    if out_dir is None:
        out_dir = os.fspath(_data_dir())
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    for name, img in toy_images():
        path = os.path.join(out_dir, f"{name}.pgm")
        write_pgm(path, img)
        paths.append(path)
    return paths


def load_toy_dataset() -> list[tuple[str, np.ndarray]]:
    """The bundled images, 8-bit quantized, sorted by name."""
    entries = sorted(p for p in _data_dir().iterdir() if p.name.endswith(".pgm"))
    out = []
    for entry in entries:
        with resources.as_file(entry) as path:
            out.append((entry.name[:-4], read_pgm(path)))
    if not out:
        raise FileNotFoundError("bundled toy dataset is missing")
    return out
