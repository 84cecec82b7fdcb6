"""Accuracy, rank-based AUC and per-profile robustness reports."""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
from scipy.stats import rankdata

from .config import hash64
from .data import DatasetIndex, to_model_input
from .distortions import EvalProfile, get_profile
from .imageio import quantize8, read_image
from .model import LPTModel


class UndefinedMetricError(ValueError):
    pass


def _check(scores, labels):
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel()
    if s.shape != y.shape:
        raise ValueError(f"scores ({s.size}) and labels ({y.size}) differ in length")
    if s.size == 0:
        raise ValueError("empty input")
    if not np.isin(y, (0, 1)).all():
        raise ValueError("labels must be 0/1")
    return s, y.astype(int)


def auc(scores, labels) -> float:
    """Mann-Whitney U / (n_pos * n_neg), ties counted one half."""
    s, y = _check(scores, labels)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC needs both classes present")
    ranks = rankdata(s)  # average ranks for ties
    u = ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def accuracy(scores, labels, threshold: float = 0.5) -> float:
    s, y = _check(scores, labels)
    return float(np.mean((s >= threshold).astype(int) == y))


@dataclass
class ProfileMetrics:
    acc: float
    auc: float
    n: int


@dataclass
class MetricsReport:
    acc: float
    auc: float
    n: int
    threshold: float
    per_profile: dict[str, ProfileMetrics] = field(default_factory=dict)

    def to_json(self) -> dict:
        return asdict(self)

    def dumps(self) -> str:
        # keep profile rows in evaluation order
        return json.dumps(self.to_json(), indent=2)

    def table(self) -> str:
        rows = [("profile", "n", "acc", "auc")]
        for name, m in self.per_profile.items():
            rows.append((name, str(m.n), f"{m.acc:.4f}", f"{m.auc:.4f}"))
        rows.append(("all", str(self.n), f"{self.acc:.4f}", f"{self.auc:.4f}"))
        widths = [max(len(r[i]) for r in rows) for i in range(4)]
        lines = ["  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in rows]
        lines.insert(1, "  ".join("-" * w for w in widths))
        return "\n".join(lines) + "\n"


def _safe_auc(scores, labels) -> float:
    try:
        return auc(scores, labels)
    except UndefinedMetricError:
        return float("nan")


def profile_inputs(
    images: Sequence[np.ndarray], profile: EvalProfile, S: int, seed: int, mean, std, workers: int = 1
) -> np.ndarray:
    """Distort (per-image seed), quantise to 8 bits as if saved to disk, then resize/normalise."""

    def job(i):
        img = images[i]
        if profile.steps or profile.composite_level is not None:
            img = quantize8(profile.apply(img, hash64(seed, i)))
        return to_model_input(img, S, mean, std)

    if workers <= 1:
        return np.stack([job(i) for i in range(len(images))])
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return np.stack(list(pool.map(job, range(len(images)))))


def evaluate(
    model: LPTModel,
    index: DatasetIndex,
    profiles: Sequence[EvalProfile | str] = ("clean",),
    use_corrector: bool = True,
    threshold: float = 0.5,
    seed: int = 0,
    mean=(0.5, 0.5, 0.5),
    std=(0.5, 0.5, 0.5),
    workers: int = 1,
    images: Sequence[np.ndarray] | None = None,
    cache: dict | None = None,
) -> MetricsReport:
    """Score every profile of ``index``. ``cache`` (optional, caller-owned) keeps the
    distorted model inputs so several models can be compared on identical data."""
    if len(index) == 0:
        raise ValueError("cannot evaluate an empty manifest")
    profs = [get_profile(p) if isinstance(p, str) else p for p in profiles]
    if "clean" not in [p.name for p in profs]:
        profs.insert(0, get_profile("clean"))
    labels = index.labels
    per, all_s, all_y = {}, [], []
    for prof in profs:
        key = (prof.name, seed, model.cfg.image_size)
        x = cache.get(key) if cache is not None else None
        if x is None:
            if images is None:
                images = [read_image(e.path) for e in index.entries]
            x = profile_inputs(images, prof, model.cfg.image_size, seed, mean, std, workers)
            if cache is not None:
                cache[key] = x
        s = model.predict_proba(x, use_corrector=use_corrector)
        per[prof.name] = ProfileMetrics(accuracy(s, labels, threshold), _safe_auc(s, labels), len(s))
        all_s.append(s)
        all_y.append(labels)
    s, y = np.concatenate(all_s), np.concatenate(all_y)
    return MetricsReport(accuracy(s, y, threshold), _safe_auc(s, y), len(s), threshold, per)
