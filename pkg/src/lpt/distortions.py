"""Seeded simulation of in-the-wild image degradations.

Strength levels 1..5 are drawn from a Gaussian over level indices and each
kind maps its level to concrete parameters through a table (see
``resources/defaults.json``). Every stochastic kind draws only from the
generator it is handed, so a pipeline is a pure function of its seed.
"""

from __future__ import annotations

import enum
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy import ndimage

from .config import ConfigError, default_config, hash64


class Kind(str, enum.Enum):
    GAUSSIAN_BLUR = "GaussianBlur"
    LENS_BLUR = "LensBlur"
    GAUSSIAN_NOISE = "GaussianNoise"
    IMPULSE_NOISE = "ImpulseNoise"
    SPECKLE_NOISE = "SpeckleNoise"
    COLOR_SHIFT = "ColorShift"
    COLOR_JITTER = "ColorJitter"
    MOIRE = "Moire"
    TONE_CURVE = "ToneCurve"
    BRIGHTEN = "Brighten"
    DARKEN = "Darken"
    JPEG_COMPRESS = "JpegCompress"
    QUANTIZE = "Quantize"
    SPATIAL_JITTER = "SpatialJitter"


CATALOG: tuple[Kind, ...] = tuple(Kind)

FAMILIES: dict[str, tuple[Kind, ...]] = {
    "blur": (Kind.GAUSSIAN_BLUR, Kind.LENS_BLUR),
    "noise": (Kind.GAUSSIAN_NOISE, Kind.IMPULSE_NOISE, Kind.SPECKLE_NOISE),
    "color": (Kind.COLOR_SHIFT, Kind.COLOR_JITTER, Kind.MOIRE, Kind.TONE_CURVE),
    "brightness": (Kind.BRIGHTEN, Kind.DARKEN),
    "compression": (Kind.JPEG_COMPRESS, Kind.QUANTIZE),
    "spatial": (Kind.SPATIAL_JITTER,),
}


def default_tables() -> dict:
    return default_config()["distortion"]["tables"]


# ---------------------------------------------------------------- level sampling


@dataclass(frozen=True)
class LevelSampler:
    mu: float = 3.0
    sigma: float = 1.0
    levels: int = 5

    def __post_init__(self):
        if not self.sigma > 0:
            raise ConfigError(f"sigma must be positive, got {self.sigma}")
        if self.levels < 1:
            raise ConfigError(f"levels must be >= 1, got {self.levels}")


def level_distribution(sampler: LevelSampler) -> np.ndarray:
    """Gaussian pdf evaluated at levels 1..n and renormalised."""
    idx = np.arange(1, sampler.levels + 1, dtype=np.float64)
    logw = -((idx - sampler.mu) ** 2) / (2.0 * sampler.sigma**2)
    w = np.exp(logw - logw.max())
    return w / w.sum()


def sample_level(sampler: LevelSampler, rng: np.random.Generator) -> int:
    cdf = np.cumsum(level_distribution(sampler))
    cdf[-1] = 1.0
    return int(np.searchsorted(cdf, rng.random(), side="right")) + 1


# ---------------------------------------------------------------- pipeline records


@dataclass(frozen=True)
class DistortionSpec:
    """One kind at one level. Level 0 is reserved as an identity test hook."""

    kind: Kind
    level: int

    def __post_init__(self):
        object.__setattr__(self, "kind", Kind(self.kind))
        if not 0 <= int(self.level) <= 5:
            raise ValueError(f"level must be in [1, 5], got {self.level}")

    def to_json(self) -> dict:
        return {"kind": self.kind.value, "level": int(self.level)}


@dataclass(frozen=True)
class DistortionPipeline:
    specs: tuple[DistortionSpec, ...]
    seed: int

    def __post_init__(self):
        specs = tuple(s if isinstance(s, DistortionSpec) else DistortionSpec(**s) for s in self.specs)
        object.__setattr__(self, "specs", specs)
        kinds = [s.kind for s in specs]
        if len(set(kinds)) != len(kinds):
            raise ValueError(f"duplicate kinds in pipeline: {[k.value for k in kinds]}")

    def to_json(self) -> dict:
        return {"seed": int(self.seed), "specs": [s.to_json() for s in self.specs]}

    @classmethod
    def from_json(cls, obj: Mapping) -> "DistortionPipeline":
        return cls(specs=tuple(DistortionSpec(s["kind"], s["level"]) for s in obj["specs"]), seed=int(obj["seed"]))


def compose_pipeline(
    catalog: Sequence[Kind | str],
    k_range: tuple[int, int],
    sampler: LevelSampler,
    rng: np.random.Generator,
    seed: int | None = None,
    fixed_level: int | None = None,
) -> DistortionPipeline:
    """Random combinational pipeline: k ~ U[kmin, kmax], k distinct kinds in sampled order."""
    kmin, kmax = k_range
    if kmin > kmax:
        raise ConfigError(f"k_min {kmin} > k_max {kmax}")
    if kmax > len(catalog):
        raise ConfigError(f"k_max {kmax} exceeds catalog size {len(catalog)}")
    k = int(rng.integers(kmin, kmax + 1))
    picks = rng.choice(len(catalog), size=k, replace=False) if k else []
    specs = []
    for i in picks:
        level = fixed_level if fixed_level is not None else sample_level(sampler, rng)
        specs.append(DistortionSpec(Kind(catalog[int(i)]), level))
    if seed is None:
        seed = int(rng.integers(0, 2**63))
    return DistortionPipeline(tuple(specs), seed)


# ---------------------------------------------------------------- parametric kernels


def gaussian_blur(img: np.ndarray, sigma: float, ksize: int | None = None) -> np.ndarray:
    if sigma <= 0:
        return img.copy()
    if ksize is None:
        ksize = 2 * math.ceil(3 * sigma) + 1
    r = ksize // 2
    x = np.arange(-r, r + 1, dtype=np.float64)
    k = np.exp(-(x**2) / (2 * sigma**2))
    k /= k.sum()
    out = ndimage.correlate1d(img, k, axis=0, mode="reflect")
    return ndimage.correlate1d(out, k, axis=1, mode="reflect")


def disc_kernel(radius: int) -> np.ndarray:
    r = int(radius)
    y, x = np.mgrid[-r : r + 1, -r : r + 1]
    k = (x * x + y * y <= r * r).astype(np.float64)
    return k / k.sum()


def lens_blur(img: np.ndarray, radius: int) -> np.ndarray:
    k = disc_kernel(radius)
    return np.stack([ndimage.correlate(img[..., c], k, mode="reflect") for c in range(img.shape[2])], axis=2)


def gaussian_noise(img, rng, std: float):
    return img + rng.normal(0.0, std, img.shape)


def impulse_noise(img, rng, rate: float, salt_fraction: float = 0.5):
    """Salt-and-pepper per pixel location (all channels together)."""
    h, w = img.shape[:2]
    hit = rng.random((h, w)) < rate
    salt = rng.random((h, w)) < salt_fraction
    out = img.copy()
    out[hit & salt] = 1.0
    out[hit & ~salt] = 0.0
    return out


def speckle_noise(img, rng, var: float):
    return img * (1.0 + rng.normal(0.0, math.sqrt(var), img.shape))


def color_shift(img, rng, max_shift: float):
    return img + rng.uniform(-max_shift, max_shift, img.shape[2])


_LUMA = np.array([0.299, 0.587, 0.114])


def color_jitter(img, rng, band: float):
    gains = rng.uniform(1.0 - band, 1.0 + band, img.shape[2])
    sat = rng.uniform(1.0 - band, 1.0 + band)
    out = img * gains
    gray = (out @ _LUMA)[..., None]
    return gray + sat * (out - gray)


def moire(img, rng, amplitude: float, freq_range=(0.05, 0.45)):
    u, v = rng.uniform(freq_range[0], freq_range[1], 2)
    phase = rng.uniform(0.0, 2 * math.pi)
    h, w = img.shape[:2]
    yy, xx = np.mgrid[0:h, 0:w]
    pattern = amplitude * np.sin(2 * math.pi * (u * xx + v * yy) + phase)
    return img + pattern[..., None]


def tone_curve(img, gain: float):
    return 0.5 + 0.5 * np.tanh(gain * (img - 0.5)) / math.tanh(gain / 2.0)


def gamma_curve(img, gamma: float):
    return np.power(np.clip(img, 0.0, 1.0), gamma)


def quantize(img, bits: int):
    levels = 2 ** int(bits) - 1
    return np.rint(np.clip(img, 0.0, 1.0) * levels) / levels


def spatial_jitter(img, rng, max_shift: int):
    h, w = img.shape[:2]
    offsets = rng.integers(-max_shift, max_shift + 1, h)
    cols = (np.arange(w)[None, :] - offsets[:, None]) % w
    return img[np.arange(h)[:, None], cols]


# ---------------------------------------------------------------- JPEG

_LUMA_Q = np.array(
    [
        [16, 11, 10, 16, 24, 40, 51, 61],
        [12, 12, 14, 19, 26, 58, 60, 55],
        [14, 13, 16, 24, 40, 57, 69, 56],
        [14, 17, 22, 29, 51, 87, 80, 62],
        [18, 22, 37, 56, 68, 109, 103, 77],
        [24, 35, 55, 64, 81, 104, 113, 92],
        [49, 64, 78, 87, 103, 121, 120, 101],
        [72, 92, 95, 98, 112, 100, 103, 99],
    ],
    dtype=np.float64,
)
_CHROMA_Q = np.full((8, 8), 99.0)
_CHROMA_Q[:4, :4] = [[17, 18, 24, 47], [18, 21, 26, 66], [24, 26, 56, 99], [47, 66, 99, 99]]

_RGB2YCC = np.array(
    [
        [0.299, 0.587, 0.114],
        [-0.168736, -0.331264, 0.5],
        [0.5, -0.418688, -0.081312],
    ]
)
_YCC2RGB = np.array(
    [
        [1.0, 0.0, 1.402],
        [1.0, -0.344136, -0.714136],
        [1.0, 1.772, 0.0],
    ]
)


def _dct_matrix(n: int = 8) -> np.ndarray:
    k = np.arange(n)[:, None]
    i = np.arange(n)[None, :]
    c = np.sqrt(2.0 / n) * np.cos(np.pi * (2 * i + 1) * k / (2 * n))
    c[0] /= np.sqrt(2.0)
    return c


_DCT = _dct_matrix()


def scaled_quant_table(base: np.ndarray, quality: int) -> np.ndarray:
    """IJG quality scaling of a base quantisation table."""
    quality = int(min(max(quality, 1), 100))
    scale = 5000 / quality if quality < 50 else 200 - 2 * quality
    return np.clip(np.floor((base * scale + 50) / 100), 1, 255)


def jpeg_compress(img: np.ndarray, quality: int) -> np.ndarray:
    """Baseline-JPEG round trip: 4:4:4 YCbCr, 8x8 DCT, table quantisation."""
    if not 1 <= int(quality) <= 100:
        raise ValueError(f"JPEG quality must be in [1, 100], got {quality}")
    h, w, _ = img.shape
    rgb = np.rint(np.clip(img, 0.0, 1.0) * 255.0)
    ycc = rgb @ _RGB2YCC.T
    ycc[..., 1:] += 128.0
    ph, pw = -h % 8, -w % 8
    ycc = np.pad(ycc, ((0, ph), (0, pw), (0, 0)), mode="edge") - 128.0
    H, W = ycc.shape[:2]
    blocks = ycc.reshape(H // 8, 8, W // 8, 8, 3).transpose(4, 0, 2, 1, 3)
    coef = _DCT @ blocks @ _DCT.T
    tables = np.stack(
        [scaled_quant_table(_LUMA_Q, quality)] + [scaled_quant_table(_CHROMA_Q, quality)] * 2
    )[:, None, None]
    coef = np.rint(coef / tables) * tables
    rec = _DCT.T @ coef @ _DCT
    ycc = rec.transpose(1, 3, 2, 4, 0).reshape(H, W, 3)[:h, :w] + 128.0
    ycc[..., 1:] -= 128.0
    rgb = ycc @ _YCC2RGB.T
    return np.clip(np.rint(rgb), 0, 255) / 255.0


# ---------------------------------------------------------------- dispatch


def _apply_params(img: np.ndarray, kind: Kind, params: Mapping, rng: np.random.Generator) -> np.ndarray:
    p = dict(params)
    if kind is Kind.GAUSSIAN_BLUR:
        return gaussian_blur(img, p["sigma"], p.get("ksize"))
    if kind is Kind.LENS_BLUR:
        return lens_blur(img, p["radius"])
    if kind is Kind.GAUSSIAN_NOISE:
        return gaussian_noise(img, rng, p["std"])
    if kind is Kind.IMPULSE_NOISE:
        return impulse_noise(img, rng, p["rate"])
    if kind is Kind.SPECKLE_NOISE:
        return speckle_noise(img, rng, p["var"])
    if kind is Kind.COLOR_SHIFT:
        return color_shift(img, rng, p["max_shift"])
    if kind is Kind.COLOR_JITTER:
        return color_jitter(img, rng, p["band"])
    if kind is Kind.MOIRE:
        return moire(img, rng, p["amplitude"])
    if kind is Kind.TONE_CURVE:
        return tone_curve(img, p["gain"])
    if kind is Kind.BRIGHTEN:
        return gamma_curve(img, p["gamma"])
    if kind is Kind.DARKEN:
        if "gamma" in p:
            return gamma_curve(img, p["gamma"])
        return gamma_curve(img, 1.0 / p["inv_gamma"])
    if kind is Kind.JPEG_COMPRESS:
        return jpeg_compress(img, p["quality"])
    if kind is Kind.QUANTIZE:
        return quantize(img, p["bits"])
    if kind is Kind.SPATIAL_JITTER:
        return spatial_jitter(img, rng, int(p["max_shift"]))
    raise ValueError(f"unknown distortion kind {kind!r}")


def level_params(kind: Kind, level: int, tables: Mapping | None = None) -> dict:
    tables = default_tables() if tables is None else tables
    row = tables[Kind(kind).value]
    return {name: values[level - 1] for name, values in row.items()}


def apply_params(img: np.ndarray, kind: Kind | str, params: Mapping, rng: np.random.Generator) -> np.ndarray:
    """Apply one kind with explicit parameters; output clamped to [0, 1]."""
    try:
        kind = Kind(kind)
    except ValueError as exc:
        raise ValueError(f"unknown distortion kind {kind!r}") from exc
    return np.clip(_apply_params(img, kind, params, rng), 0.0, 1.0)


def apply_distortion(
    img: np.ndarray, spec: DistortionSpec, rng: np.random.Generator, tables: Mapping | None = None
) -> np.ndarray:
    if not isinstance(spec, DistortionSpec):
        raise TypeError(f"expected DistortionSpec, got {type(spec).__name__}")
    if spec.level == 0:
        return np.clip(img, 0.0, 1.0)
    return apply_params(img, spec.kind, level_params(spec.kind, spec.level, tables), rng)


def distort(img: np.ndarray, pipeline: DistortionPipeline, tables: Mapping | None = None) -> np.ndarray:
    rng = np.random.default_rng(pipeline.seed)
    out = np.asarray(img, dtype=np.float64)
    for spec in pipeline.specs:
        out = apply_distortion(out, spec, rng, tables)
    return out


def child_seed(seed: int, index: int) -> int:
    return hash64(seed, index)


def distort_many(
    images: Sequence[np.ndarray],
    pipelines: Sequence[DistortionPipeline],
    workers: int = 1,
    tables: Mapping | None = None,
) -> list[np.ndarray]:
    """Apply per-image pipelines; the result is independent of ``workers``."""
    if len(images) != len(pipelines):
        raise ValueError("images and pipelines differ in length")
    job = lambda pair: distort(pair[0], pair[1], tables)  # noqa: E731
    if workers <= 1:
        return [job(p) for p in zip(images, pipelines)]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(job, zip(images, pipelines)))


# ---------------------------------------------------------------- evaluation profiles


@dataclass(frozen=True)
class ParamStep:
    kind: Kind
    params: dict = field(default_factory=dict)


@dataclass(frozen=True)
class EvalProfile:
    """A named evaluation condition.

    ``steps`` are fixed parameterised distortions applied in order. When
    ``composite_level`` is set, each image instead gets its own random
    combinational pipeline with every level pinned to that value.
    """

    name: str
    steps: tuple[ParamStep, ...] = ()
    composite_level: int | None = None
    k_range: tuple[int, int] = (1, 3)

    def __post_init__(self):
        for step in self.steps:
            _check_params(step.kind, step.params)

    def apply(self, img: np.ndarray, seed: int, catalog: Sequence[Kind] = CATALOG, tables=None) -> np.ndarray:
        if self.composite_level is not None:
            rng = np.random.default_rng(seed)
            pipe = compose_pipeline(catalog, self.k_range, LevelSampler(), rng, fixed_level=self.composite_level)
            return distort(img, pipe, tables)
        rng = np.random.default_rng(seed)
        out = img
        for step in self.steps:
            out = apply_params(out, step.kind, step.params, rng)
        return out


_PARAM_RANGES: dict[Kind, dict[str, tuple[float, float]]] = {
    Kind.GAUSSIAN_BLUR: {"sigma": (0.0, 20.0), "ksize": (1, 99)},
    Kind.LENS_BLUR: {"radius": (1, 30)},
    Kind.GAUSSIAN_NOISE: {"std": (0.0, 1.0)},
    Kind.IMPULSE_NOISE: {"rate": (0.0, 1.0)},
    Kind.SPECKLE_NOISE: {"var": (0.0, 4.0)},
    Kind.COLOR_SHIFT: {"max_shift": (0.0, 1.0)},
    Kind.COLOR_JITTER: {"band": (0.0, 1.0)},
    Kind.MOIRE: {"amplitude": (0.0, 1.0)},
    Kind.TONE_CURVE: {"gain": (0.01, 50.0)},
    Kind.BRIGHTEN: {"gamma": (0.01, 1.0)},
    Kind.DARKEN: {"gamma": (1.0, 100.0), "inv_gamma": (0.01, 1.0)},
    Kind.JPEG_COMPRESS: {"quality": (1, 100)},
    Kind.QUANTIZE: {"bits": (1, 8)},
    Kind.SPATIAL_JITTER: {"max_shift": (0, 1000)},
}


def _check_params(kind: Kind, params: Mapping):
    ranges = _PARAM_RANGES[Kind(kind)]
    for name, value in params.items():
        if name not in ranges:
            raise ConfigError(f"{Kind(kind).value} has no parameter '{name}'")
        lo, hi = ranges[name]
        if not lo <= value <= hi:
            raise ConfigError(f"{Kind(kind).value}.{name}={value} outside [{lo}, {hi}]")
    if Kind(kind) is Kind.GAUSSIAN_BLUR and "ksize" in params and params["ksize"] % 2 == 0:
        raise ConfigError("GaussianBlur ksize must be odd")


PROFILES: dict[str, EvalProfile] = {
    "clean": EvalProfile("clean"),
    "jpeg50": EvalProfile("jpeg50", (ParamStep(Kind.JPEG_COMPRESS, {"quality": 50}),)),
    "blur7": EvalProfile("blur7", (ParamStep(Kind.GAUSSIAN_BLUR, {"sigma": 2.0, "ksize": 7}),)),
    "noise25": EvalProfile("noise25", (ParamStep(Kind.SPECKLE_NOISE, {"var": 0.25}),)),
    "hard": EvalProfile("hard", composite_level=5),
}
PROFILE_ALIASES = {"tab7-jpeg50": "jpeg50", "tab7-blur": "blur7", "tab7-noise": "noise25"}


def get_profile(name: str) -> EvalProfile:
    key = PROFILE_ALIASES.get(name, name)
    if key not in PROFILES:
        raise ConfigError(f"unknown profile '{name}' (known: {', '.join(sorted(PROFILES))})")
    return PROFILES[key]
