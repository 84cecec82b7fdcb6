"""Synthetic real/fake corpus: smooth scenes, fakes carry a faint periodic watermark."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .config import hash64
from .data import write_manifest
from .imageio import from_uint8, to_uint8, write_ppm

SIZE = 96
WATERMARK_AMPLITUDE = 0.08
WATERMARK_PERIOD = 12.0  # pixels, along y only so per-row horizontal shifts leave it intact


def watermark(h: int = SIZE, w: int = SIZE, amplitude: float = WATERMARK_AMPLITUDE, period: float = WATERMARK_PERIOD):
    y = np.arange(h, dtype=np.float64)[:, None, None]
    return np.broadcast_to(amplitude * np.sin(2 * np.pi * y / period), (h, w, 3)).copy()


def scene(rng: np.random.Generator, size: int = SIZE) -> np.ndarray:
    """Random gradient plus a few soft-edged ellipses, kept inside [0.1, 0.9]."""
    yy, xx = np.mgrid[0:size, 0:size] / (size - 1.0)
    theta = rng.uniform(0, 2 * np.pi)
    ramp = np.cos(theta) * xx + np.sin(theta) * yy
    c0, c1 = rng.uniform(0.2, 0.8, 3), rng.uniform(0.2, 0.8, 3)
    img = c0 + (c1 - c0) * ramp[..., None]
    for _ in range(int(rng.integers(2, 6))):
        cy, cx = rng.uniform(0, 1, 2)
        ry, rx = rng.uniform(0.08, 0.35, 2)
        d = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2
        mask = 1.0 / (1.0 + np.exp(np.minimum((d - 1.0) * 6.0, 50.0)))
        color = rng.uniform(0.1, 0.9, 3)
        img = img * (1 - mask[..., None]) + color * mask[..., None]
    img = gaussian_filter(img, sigma=(2.0, 2.0, 0))
    lo, hi = img.min(), img.max()
    img = 0.5 + (img - 0.5 * (lo + hi)) * min(1.0, 0.8 / max(hi - lo, 1e-9))
    return np.clip(img, 0.1, 0.9)


def band_energy(img: np.ndarray, period: float = WATERMARK_PERIOD) -> float:
    """Power of the single vertical frequency 1/period (direct correlation, no FFT)."""
    g = img.mean(axis=2) - img.mean()
    y = np.arange(g.shape[0], dtype=np.float64)
    rows = g.sum(axis=1)
    c = rows @ np.cos(2 * np.pi * y / period)
    s = rows @ np.sin(2 * np.pi * y / period)
    return float((c * c + s * s) / g.size)


def make_pair(seed: int, index: int) -> tuple[np.ndarray, np.ndarray]:
    """(real, fake) rasters quantised to 8 bits; the fake is the real scene plus the watermark."""
    real = scene(np.random.default_rng(hash64(seed, index)))
    fake = np.clip(real + watermark(*real.shape[:2]), 0.0, 1.0)
    return from_uint8(to_uint8(real)), from_uint8(to_uint8(fake))


def synth(n: int, out_dir: str | Path, seed: int = 0) -> Path:
    """Write ``n`` real and ``n`` fake PPMs plus ``manifest.csv``; returns the manifest path."""
    if n < 2:
        raise ValueError(f"n must be >= 2, got {n}")
    out = Path(out_dir)
    (out / "real").mkdir(parents=True, exist_ok=True)
    (out / "fake").mkdir(parents=True, exist_ok=True)
    rows = []
    for i in range(n):
        real, fake = make_pair(seed, i)
        write_ppm(out / "real" / f"{i:05d}.ppm", real)
        write_ppm(out / "fake" / f"{i:05d}.ppm", fake)
        rows += [(f"real/{i:05d}.ppm", 0), (f"fake/{i:05d}.ppm", 1)]
    manifest = out / "manifest.csv"
    write_manifest(manifest, rows)
    return manifest
