"""Run configuration: packaged defaults, file/flag overrides, validation."""

from __future__ import annotations

import copy
import hashlib
import json
import struct
from importlib import resources
from pathlib import Path
from typing import Any


class ConfigError(ValueError):
    pass


def default_config() -> dict:
    text = resources.files("lpt").joinpath("resources/defaults.json").read_text()
    return json.loads(text)


def merge(base: dict, override: dict, path: str = "") -> dict:
    """Recursively overlay ``override`` onto a copy of ``base``; unknown keys are errors."""
    out = copy.deepcopy(base)
    for key, value in override.items():
        where = f"{path}.{key}" if path else key
        if key not in out:
            # free-form sub-tables
            if path.endswith("tables") or path == "distortion.tables":
                out[key] = copy.deepcopy(value)
                continue
            raise ConfigError(f"unknown config key '{where}'")
        if isinstance(out[key], dict) and isinstance(value, dict):
            out[key] = merge(out[key], value, where)
        else:
            out[key] = copy.deepcopy(value)
    return out


def load_config(path: str | Path | None = None, overrides: dict | None = None) -> dict:
    cfg = default_config()
    if path is not None:
        try:
            user = json.loads(Path(path).read_text())
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
        cfg = merge(cfg, user)
    if overrides:
        cfg = merge(cfg, overrides)
    validate(cfg)
    return cfg


def _require(cond: bool, msg: str):
    if not cond:
        raise ConfigError(msg)


def validate(cfg: dict) -> None:
    m = cfg["model"]
    _require(m["dim"] % m["heads"] == 0, "model.dim must be divisible by model.heads")
    _require(m["image_size"] % m["patch_size"] == 0, "model.image_size must be divisible by model.patch_size")
    _require(m["mode"] in ("full", "lora"), "model.mode must be 'full' or 'lora'")
    _require(1 <= m["lora_rank"] <= m["dim"], "model.lora_rank must be in [1, dim]")

    t = cfg["train"]
    _require(int(t["epochs"]) >= 1, "train.epochs must be >= 1")
    _require(float(t["lr"]) > 0, "train.lr must be > 0")
    _require(int(t["batch_size"]) >= 1, "train.batch_size must be >= 1")
    _require(t["schedule"] == "cosine", "train.schedule must be 'cosine'")

    loss = cfg["loss"]
    _require(loss["alpha"] >= 0 and loss["beta"] >= 0, "loss.alpha and loss.beta must be >= 0")

    d = cfg["distortion"]
    _require(d["sigma"] > 0, "distortion.sigma must be > 0")
    _require(d["levels"] >= 1, "distortion.levels must be >= 1")
    _require(0 <= d["kmin"] <= d["kmax"], "distortion.kmin must be <= kmax")
    _require(d["kmax"] <= len(d["catalog"]) or not d["catalog"], "distortion.kmax exceeds catalog size")

    s = cfg["size_aug"]
    _require(0 <= s["T1"] <= 1 and 0 <= s["T2"] <= 1, "size_aug thresholds must lie in [0, 1]")
    _require(s["tgt"] >= 64, "size_aug.tgt must be >= 64")

    dd = cfg["data"]
    _require(len(dd["mean"]) == 3 and len(dd["std"]) == 3, "data.mean/std need 3 entries")
    _require(all(v > 0 for v in dd["std"]), "data.std entries must be > 0")


def hash64(*values: int) -> int:
    """Stable 64-bit hash of a tuple of integers (seed derivation)."""
    payload = b"".join(struct.pack("<Q", int(v) & 0xFFFFFFFFFFFFFFFF) for v in values)
    return int.from_bytes(hashlib.blake2b(payload, digest_size=8).digest(), "little")


def dump_json(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, indent=2)
