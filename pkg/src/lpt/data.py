"""Manifest ingestion, model-input conversion and paired clean/distorted batches."""

from __future__ import annotations

import csv
import logging
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .config import ConfigError, hash64
from .distortions import (
    DistortionPipeline,
    Kind,
    LevelSampler,
    compose_pipeline,
    default_tables,
    distort,
)
from .imageio import ImageDecodeError, read_image
from .size_augment import Interp, SizeAugConfig, random_crop_resize, resize

log = logging.getLogger(__name__)

LABELS = {0: "real", 1: "fake"}
SPLITS = ("train", "val1", "val2", "test")


@dataclass(frozen=True)
class Entry:
    path: Path
    label: int
    split: str = ""


@dataclass
class DatasetIndex:
    entries: list[Entry]
    counts: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        c = Counter(LABELS[e.label] for e in self.entries)
        self.counts = {name: c.get(name, 0) for name in LABELS.values()}

    def __len__(self):
        return len(self.entries)

    @property
    def labels(self) -> np.ndarray:
        return np.array([e.label for e in self.entries], dtype=int)

    def by_label(self, label: int) -> list[int]:
        return [i for i, e in enumerate(self.entries) if e.label == label]

    def split(self, tag: str) -> "DatasetIndex":
        return DatasetIndex([e for e in self.entries if e.split == tag])


def load_manifest(path: str | Path, data_root: str | Path | None = None, check_exists: bool = True) -> DatasetIndex:
    """Read a ``path,label[,split]`` CSV. Relative paths resolve against ``data_root``
    (default: the manifest's directory)."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"manifest not found: {path}")
    root = Path(data_root) if data_root is not None else path.parent
    entries = []
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header[:2]] != ["path", "label"]:
            raise ConfigError(f"{path}:1: expected header 'path,label', got {header}")
        has_split = len(header) > 2 and header[2].strip() == "split"
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) < 2 or (len(row) > 2 and not has_split) or len(row) > 3:
                raise ConfigError(f"{path}:{lineno}: malformed row {row}")
            raw, lab = row[0].strip(), row[1].strip()
            if lab not in ("0", "1"):
                raise ConfigError(f"{path}:{lineno}: label must be 0 or 1, got '{lab}'")
            split = row[2].strip() if has_split and len(row) > 2 else ""
            if split and split not in SPLITS:
                raise ConfigError(f"{path}:{lineno}: unknown split tag '{split}'")
            p = Path(raw)
            if not p.is_absolute():
                p = root / p
            if check_exists and not p.is_file():
                raise ConfigError(f"{path}:{lineno}: image not found: {p}")
            entries.append(Entry(p, int(lab), split))
    return DatasetIndex(entries)


def write_manifest(path: str | Path, rows: Sequence[tuple[str, int]]) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["path", "label"])
        for p, lab in rows:
            w.writerow([p, int(lab)])


def normalize(img: np.ndarray, mean=(0.5, 0.5, 0.5), std=(0.5, 0.5, 0.5)) -> np.ndarray:
    """HxWxC in [0, 1] -> CxHxW, (v - mean) / std per channel."""
    mean = np.asarray(mean, dtype=np.float64)
    std = np.asarray(std, dtype=np.float64)
    return np.ascontiguousarray(((img - mean) / std).transpose(2, 0, 1))


def to_model_input(img: np.ndarray, S: int, mean=(0.5, 0.5, 0.5), std=(0.5, 0.5, 0.5)) -> np.ndarray:
    if img.size == 0:
        raise ValueError("empty image")
    if img.shape[:2] != (S, S):
        img = resize(img, S, S, Interp.LINEAR)
    return normalize(img, mean, std)


@dataclass(frozen=True)
class AugConfig:
    """Everything batch assembly needs besides the index."""

    image_size: int = 64
    size_aug: SizeAugConfig | None = None
    distortion: bool = True
    catalog: tuple[Kind, ...] = ()
    k_range: tuple[int, int] = (1, 3)
    sampler: LevelSampler = LevelSampler()
    tables: dict | None = None
    mean: tuple = (0.5, 0.5, 0.5)
    std: tuple = (0.5, 0.5, 0.5)
    decode_retries: int = 8

    @classmethod
    def from_config(cls, cfg: dict) -> "AugConfig":
        d, s = cfg["distortion"], cfg["size_aug"]
        tables = {**default_tables(), **d.get("tables", {})}
        return cls(
            image_size=int(cfg["model"]["image_size"]),
            size_aug=SizeAugConfig(tgt=s["tgt"], T1=s["T1"], T2=s["T2"]) if s["enabled"] else None,
            distortion=bool(d["enabled"]) and bool(d["catalog"]),
            catalog=tuple(Kind(k) for k in d["catalog"]),
            k_range=(int(d["kmin"]), int(d["kmax"])),
            sampler=LevelSampler(d["mu"], d["sigma"], d["levels"]),
            tables=tables,
            mean=tuple(cfg["data"]["mean"]),
            std=tuple(cfg["data"]["std"]),
            decode_retries=int(cfg["data"]["decode_retries"]),
        )


@dataclass
class PairBatch:
    x: np.ndarray
    x_hat: np.ndarray
    y: np.ndarray
    pipelines: list[DistortionPipeline]
    paths: list[Path]


@dataclass
class _Sample:
    x: np.ndarray
    x_hat: np.ndarray
    label: int
    pipeline: DistortionPipeline
    path: Path


def _build_sample(index: DatasetIndex, pools: dict, aug: AugConfig, seed: int) -> _Sample:
    rng = np.random.default_rng(seed)
    labels = sorted(pools)
    label = labels[int(rng.integers(len(labels)))]
    pool = pools[label]
    img = entry = None
    for attempt in range(aug.decode_retries + 1):
        entry = index.entries[pool[int(rng.integers(len(pool)))]]
        try:
            img = read_image(entry.path)
            break
        except (ImageDecodeError, OSError) as exc:
            log.warning("skipping undecodable %s (%s), attempt %d", entry.path, exc, attempt + 1)
    if img is None:
        raise ImageDecodeError(f"decode retry budget ({aug.decode_retries}) exhausted; last: {entry.path}")

    clean = random_crop_resize(img, aug.size_aug, rng) if aug.size_aug is not None else img
    if aug.distortion:
        pipe = compose_pipeline(aug.catalog, aug.k_range, aug.sampler, rng, seed=hash64(seed, 1))
    else:
        pipe = DistortionPipeline((), hash64(seed, 1))
    dist = distort(clean, pipe, aug.tables) if pipe.specs else clean
    S = aug.image_size
    return _Sample(
        to_model_input(clean, S, aug.mean, aug.std),
        to_model_input(dist, S, aug.mean, aug.std),
        label,
        pipe,
        entry.path,
    )


def sample_seed(seed: int, step: int, i: int) -> int:
    return hash64(seed, step, i)


def build_pair_batch(
    index: DatasetIndex,
    B: int,
    aug: AugConfig,
    seed: int,
    step: int = 0,
    workers: int = 1,
) -> PairBatch:
    """Class-balanced pair batch; sample ``i`` draws only from ``hash64(seed, step, i)``
    so the batch does not depend on ``workers``."""
    if B < 1:
        raise ValueError(f"batch size must be >= 1, got {B}")
    pools = {lab: idx for lab in (0, 1) if (idx := index.by_label(lab))}
    if not pools:
        raise ValueError("empty dataset index")
    seeds = [sample_seed(seed, step, i) for i in range(B)]
    job = lambda s: _build_sample(index, pools, aug, s)  # noqa: E731
    if workers <= 1:
        samples = [job(s) for s in seeds]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            samples = list(pool.map(job, seeds))
    return PairBatch(
        x=np.stack([s.x for s in samples]),
        x_hat=np.stack([s.x_hat for s in samples]),
        y=np.array([s.label for s in samples], dtype=int),
        pipelines=[s.pipeline for s in samples],
        paths=[s.path for s in samples],
    )


def load_eval_images(index: DatasetIndex) -> list[np.ndarray]:
    return [read_image(e.path) for e in index.entries]
