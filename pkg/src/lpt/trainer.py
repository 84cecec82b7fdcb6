"""Pairwise training loop: joint loss, AdamW, cosine schedule, run-directory layout."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import autodiff as ad
from .config import ConfigError, dump_json
from .data import AugConfig, DatasetIndex, build_pair_batch, load_eval_images
from .losses import LossOptions, LossWeights, joint_loss
from .metrics import evaluate
from .model import LPTModel, ViTConfig, load_checkpoint, save_checkpoint
from .optim import AdamWState, adamw_step, cosine_lr

log = logging.getLogger(__name__)


class NonFiniteLossError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 5
    lr: float = 2e-4
    weight_decay: float = 5e-4
    batch_size: int = 16
    seed: int = 0
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    schedule: str = "cosine"

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if not self.lr > 0:
            raise ConfigError(f"lr must be > 0, got {self.lr}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.schedule != "cosine":
            raise ConfigError(f"unsupported schedule {self.schedule!r}")

    @classmethod
    def from_config(cls, cfg: dict, seed: int) -> "TrainConfig":
        t = cfg["train"]
        return cls(
            epochs=int(t["epochs"]),
            lr=float(t["lr"]),
            weight_decay=float(t["weight_decay"]),
            batch_size=int(t["batch_size"]),
            seed=int(seed),
            betas=tuple(t["betas"]),
            eps=float(t["eps"]),
            schedule=t["schedule"],
        )


def loss_options(cfg: dict) -> LossOptions:
    t = cfg["train"]
    return LossOptions(
        ce_on_distorted=bool(t["ce_on_distorted"]),
        kl_detach_target=bool(t["kl_detach_target"]),
        kl_reverse=bool(t["kl_reverse"]),
        mse_detach_clean=bool(t["mse_detach_clean"]),
    )


@dataclass
class TrainResult:
    model: LPTModel
    steps: int
    records: list[dict] = field(default_factory=list)
    val: list[dict] = field(default_factory=list)
    best_epoch: int | None = None


def _record_line(rec: dict) -> str:
    return json.dumps(rec, sort_keys=False) + "\n"


def train(
    index: DatasetIndex,
    model: LPTModel,
    cfg: TrainConfig,
    w: LossWeights,
    aug: AugConfig,
    opts: LossOptions = LossOptions(),
    out_dir: str | Path | None = None,
    val_index: DatasetIndex | None = None,
    workers: int = 1,
    on_step: Callable[[dict], None] | None = None,
) -> TrainResult:
    """Run ``cfg.epochs`` epochs of ``ceil(N / B)`` pair-batch steps each.

    With ``out_dir`` set, writes ``logs/train.jsonl``, ``logs/val.jsonl`` and
    ``checkpoints/{last,best}.lptc`` under it.
    """
    if len(index) == 0:
        raise ValueError("empty training index")
    B = cfg.batch_size
    steps_per_epoch = math.ceil(len(index) / B)
    total = cfg.epochs * steps_per_epoch
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        for sub in ("checkpoints", "logs", "reports"):
            (out / sub).mkdir(parents=True, exist_ok=True)
        train_log = (out / "logs" / "train.jsonl").open("w")
        val_log = (out / "logs" / "val.jsonl").open("w")
    val_images = load_eval_images(val_index) if val_index is not None and len(val_index) else None

    params = model.trainable_parameters()
    state = AdamWState()
    result = TrainResult(model, total)
    best_auc = -math.inf
    try:
        step = 0
        for epoch in range(cfg.epochs):
            for _ in range(steps_per_epoch):
                lr = cosine_lr(step, total, cfg.lr)
                batch = build_pair_batch(index, B, aug, cfg.seed, step, workers)
                model.zero_grad()
                terms = joint_loss(model.forward_pair(batch.x, batch.x_hat), batch.y, w, opts)
                if not np.isfinite(terms.total.item()):
                    ad.current_tape().clear()
                    _dump_nonfinite(out, step, batch, terms.as_record())
                    raise NonFiniteLossError(f"non-finite loss at step {step}: {terms.as_record()}")
                ad.backward(terms.total)
                adamw_step(params, [p.grad for p in params], state, lr, cfg.weight_decay, cfg.betas, cfg.eps)
                rec = {"step": step, "lr": lr, **terms.as_record()}
                result.records.append(rec)
                if out is not None:
                    train_log.write(_record_line(rec))
                if on_step is not None:
                    on_step(rec)
                step += 1

            vrec = {"epoch": epoch, "step": step}
            if val_images is not None:
                rep = evaluate(model, val_index, ["clean"], seed=cfg.seed, mean=aug.mean, std=aug.std, images=val_images)
                vrec.update(auc=rep.auc, acc=rep.acc)
                score = rep.auc if not math.isnan(rep.auc) else rep.acc
            else:
                score = float(epoch)  # no validation: latest is best
            result.val.append(vrec)
            log.info("epoch %d: %s", epoch, vrec)
            if out is not None:
                val_log.write(_record_line(vrec))
                extra = {"epoch": epoch, "step": step}
                save_checkpoint(out / "checkpoints" / "last.lptc", model, extra)
                if score > best_auc:
                    save_checkpoint(out / "checkpoints" / "best.lptc", model, extra)
            if score > best_auc:
                best_auc, result.best_epoch = score, epoch
    finally:
        if out is not None:
            train_log.close()
            val_log.close()
    return result


def _dump_nonfinite(out: Path | None, step: int, batch, terms: dict) -> None:
    report = {
        "step": step,
        "terms": {k: repr(v) for k, v in terms.items()},
        "paths": [str(p) for p in batch.paths],
        "pipelines": [p.to_json() for p in batch.pipelines],
    }
    log.error("non-finite loss at step %d; pipelines: %s", step, report["pipelines"])
    if out is not None:
        (out / "reports" / f"nonfinite_step{step}.json").write_text(dump_json(report))


def build_model(cfg: dict, seed: int) -> LPTModel:
    init = cfg["train"].get("init_checkpoint")
    if init:
        model, _ = load_checkpoint(init)
    else:
        model = LPTModel(ViTConfig.from_dict(cfg["model"]), seed=seed)
    model.set_mode(cfg["model"]["mode"])
    return model


def run_training(
    cfg: dict,
    index: DatasetIndex,
    out_dir: str | Path,
    seed: int,
    val_index: DatasetIndex | None = None,
    workers: int = 1,
) -> TrainResult:
    """Train from a resolved config dict, writing the standard run directory."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    resolved = {**cfg, "seed": int(seed)}
    (out / "config.resolved.json").write_text(dump_json(resolved))
    model = build_model(cfg, seed)
    return train(
        index,
        model,
        TrainConfig.from_config(cfg, seed),
        LossWeights(cfg["loss"]["alpha"], cfg["loss"]["beta"]),
        AugConfig.from_config(cfg),
        loss_options(cfg),
        out_dir=out,
        val_index=val_index,
        workers=workers,
    )
