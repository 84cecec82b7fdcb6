"""Random crop-and-resize size simulation plus separable resampling kernels."""

from __future__ import annotations

import enum
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .config import ConfigError


class Interp(str, enum.Enum):
    NEAREST = "NEAREST"
    LINEAR = "LINEAR"
    CUBIC = "CUBIC"
    AREA = "AREA"


INTERP_SET: tuple[Interp, ...] = (Interp.NEAREST, Interp.LINEAR, Interp.CUBIC, Interp.AREA)


@dataclass(frozen=True)
class SizeAugConfig:
    tgt: int = 224
    T1: float = 0.3
    T2: float = 0.3
    interp_set: tuple[Interp, ...] = INTERP_SET

    def __post_init__(self):
        if not (0 <= self.T1 <= 1 and 0 <= self.T2 <= 1):
            raise ConfigError(f"thresholds must be in [0, 1], got T1={self.T1} T2={self.T2}")
        if self.tgt < 64:
            raise ConfigError(f"tgt must be >= 64, got {self.tgt}")


def randint(lo: int, hi: int, rng) -> int:
    """Uniform on [lo, hi); returns ``lo`` without drawing when lo == hi."""
    if lo > hi:
        raise ValueError(f"randint bounds reversed: lo={lo} > hi={hi}")
    if lo == hi:
        return lo
    return int(rng.integers(lo, hi))


# ---------------------------------------------------------------- resampling


def _cubic(t: np.ndarray) -> np.ndarray:
    # Catmull-Rom (a = -0.5)
    a = -0.5
    t = np.abs(t)
    t2, t3 = t * t, t * t * t
    return np.where(
        t <= 1,
        (a + 2) * t3 - (a + 3) * t2 + 1,
        np.where(t < 2, a * t3 - 5 * a * t2 + 8 * a * t - 4 * a, 0.0),
    )


@lru_cache(maxsize=256)
def resample_matrix(n_in: int, n_out: int, mode: Interp) -> np.ndarray:
    """Row-stochastic (n_out x n_in) matrix for one axis; borders replicate."""
    mode = Interp(mode)
    m = np.zeros((n_out, n_in))
    scale = n_in / n_out
    rows = np.arange(n_out)
    if mode is Interp.NEAREST:
        src = np.minimum(np.floor((rows + 0.5) * scale).astype(int), n_in - 1)
        m[rows, src] = 1.0
    elif mode is Interp.LINEAR:
        x = (rows + 0.5) * scale - 0.5
        x0 = np.floor(x).astype(int)
        frac = x - x0
        np.add.at(m, (rows, np.clip(x0, 0, n_in - 1)), 1.0 - frac)
        np.add.at(m, (rows, np.clip(x0 + 1, 0, n_in - 1)), frac)
    elif mode is Interp.CUBIC:
        x = (rows + 0.5) * scale - 0.5
        x0 = np.floor(x).astype(int)
        for off in (-1, 0, 1, 2):
            idx = x0 + off
            np.add.at(m, (rows, np.clip(idx, 0, n_in - 1)), _cubic(x - idx))
    elif mode is Interp.AREA:
        lo = rows * scale
        hi = (rows + 1) * scale
        for j in range(n_in):
            overlap = np.clip(np.minimum(hi, j + 1) - np.maximum(lo, j), 0.0, None)
            m[:, j] = overlap / scale
    m.setflags(write=False)
    return m


def resize(img: np.ndarray, w: int, h: int, mode: Interp | str = Interp.LINEAR) -> np.ndarray:
    """Resize an H x W x C raster to h x w. Output clamped to [0, 1]."""
    if w < 1 or h < 1:
        raise ValueError(f"target size must be positive, got {w}x{h}")
    mode = Interp(mode)
    H, W = img.shape[:2]
    if (H, W) == (h, w) and mode is Interp.NEAREST:
        return img.copy()
    my = resample_matrix(H, h, mode)
    mx = resample_matrix(W, w, mode)
    C = img.shape[2] if img.ndim == 3 else 1
    out = (my @ img.reshape(H, W * C)).reshape(h, W, C)
    out = np.matmul(mx, out)  # (w, W) @ (h, W, C) -> (h, w, C)
    out = out.reshape((h, w) + img.shape[2:])
    return np.clip(out, 0.0, 1.0)


# ---------------------------------------------------------------- crop / resize augmentation


@dataclass(frozen=True)
class CropResizePlan:
    branch: str  # "crop" | "resize" | "identity"
    top: int = 0
    left: int = 0
    crop_h: int = 0
    crop_w: int = 0
    mode: Interp | None = None
    out_w: int = 0
    out_h: int = 0


def plan_crop_resize(shape: tuple, cfg: SizeAugConfig, rng) -> CropResizePlan:
    """Draw every random decision of the crop/resize augmentation for a raster of ``shape``."""
    H, W = shape[:2]
    tgt = cfg.tgt
    r_c = rng.random()
    r_r = rng.random()
    if r_c < cfg.T1:
        r = rng.random()
        if H >= tgt and r < cfg.T2:
            h_new = randint(64, tgt, rng)
        elif H >= tgt:
            h_new = randint(tgt, H, rng)
        else:
            h_new = H
        if W >= tgt and r < cfg.T2:
            w_new = randint(32, tgt, rng)
        elif W >= tgt:
            w_new = randint(tgt, W, rng)
        else:
            w_new = W
        top = randint(0, max(h_new - tgt, 0), rng)
        left = randint(0, max(w_new - tgt, 0), rng)
        crop_h, crop_w = min(h_new, tgt), min(w_new, tgt)
        return CropResizePlan("crop", top, left, crop_h, crop_w, out_w=crop_w, out_h=crop_h)
    if r_r < 0.25:
        mode = cfg.interp_set[int(rng.integers(0, len(cfg.interp_set)))]
        return CropResizePlan("resize", mode=mode, out_w=max(W // 2, 1), out_h=max(H // 2, 1))
    return CropResizePlan("identity", out_w=W, out_h=H)


def apply_plan(img: np.ndarray, plan: CropResizePlan) -> np.ndarray:
    if plan.branch == "crop":
        return img[plan.top : plan.top + plan.crop_h, plan.left : plan.left + plan.crop_w].copy()
    if plan.branch == "resize":
        return resize(img, plan.out_w, plan.out_h, plan.mode)
    return img


def random_crop_resize(img: np.ndarray, cfg: SizeAugConfig, rng) -> np.ndarray:
    if img.size == 0:
        raise ValueError("empty image")
    return apply_plan(img, plan_crop_resize(img.shape, cfg, rng))
