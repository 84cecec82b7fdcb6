"""Finite-difference check of the full pairwise loss over every trainable parameter."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .losses import LossOptions, LossWeights, joint_loss
from .model import LPTModel, ViTConfig


def randomize_parameters(model: LPTModel, rng: np.random.Generator, std: float = 0.3) -> None:
    """Move every parameter off its init so zero-initialised paths carry gradient."""
    for name, p in model.named_parameters().items():
        if name.endswith("gamma"):
            p.data = 1.0 + rng.normal(0.0, 0.1, p.shape)
        else:
            p.data = rng.normal(0.0, std, p.shape)


def model_gradcheck(
    cfg: ViTConfig | None = None,
    seed: int = 0,
    batch: int = 2,
    weights: LossWeights = LossWeights(),
    opts: LossOptions = LossOptions(),
    h: float = 1e-5,
) -> float:
    """Max relative error of backprop vs central differences on one random pair batch."""
    cfg = cfg or ViTConfig.tiny()
    model = LPTModel(cfg, seed=seed)
    rng = np.random.default_rng(seed)
    randomize_parameters(model, rng)
    shape = (batch, cfg.channels, cfg.image_size, cfg.image_size)
    x = rng.uniform(-1.0, 1.0, shape)
    x_hat = np.clip(x + rng.normal(0.0, 0.3, shape), -1.0, 1.0)
    y = np.arange(batch) % 2

    target = None
    if weights.alpha > 0 and opts.kl_detach_target:
        # a detached target is a constant: freeze it at the unperturbed point
        with ad.no_grad():
            out = model.forward_pair(x, x_hat)
            src = out.logits_dist if opts.kl_reverse else out.logits_clean
            target = ad.softmax(src, axis=-1).data.copy()

    def loss(_params):
        return joint_loss(model.forward_pair(x, x_hat), y, weights, opts, kl_target=target).total

    return ad.grad_check(loss, model.trainable_parameters(), h=h)
