"""Pairwise objective: CE on both branches, clean-anchored KL, feature MSE."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .model import ForwardOutputs

KL_FLOOR = 1e-12


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 0.5
    beta: float = 0.25

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError(f"loss weights must be non-negative, got alpha={self.alpha} beta={self.beta}")


@dataclass(frozen=True)
class LossOptions:
    ce_on_distorted: bool = True
    kl_detach_target: bool = True
    kl_reverse: bool = False  # True: KL(distorted || clean)
    mse_detach_clean: bool = False


def cross_entropy(logits: Tensor, y) -> Tensor:
    """Mean negative log-likelihood of integer labels under softmax(logits)."""
    y = np.asarray(y, dtype=int)
    if np.any((y < 0) | (y >= logits.shape[-1])):
        raise ValueError(f"labels out of range for {logits.shape[-1]} classes")
    onehot = np.eye(logits.shape[-1])[y]
    return -(ad.log_softmax(logits, axis=-1) * Tensor(onehot)).sum() * (1.0 / len(y))


def kl_divergence(p_target, q) -> Tensor:
    """Batch mean of sum_c p * ln(p / max(q, 1e-12)), with 0 * ln 0 = 0.

    ``p_target`` is treated as a constant unless it is a Tensor on the tape.
    """
    p = p_target if isinstance(p_target, Tensor) else Tensor(p_target)
    q = q if isinstance(q, Tensor) else Tensor(q)
    pd = p.data
    safe_p = np.where(pd > 0, pd, 1.0)
    # p ln p with the 0 ln 0 = 0 convention; differentiable where p > 0
    plogp = p * ad.log(Tensor(safe_p) if not p.requires_grad else _safe(p))
    cross = p * ad.log(ad.clamp_min(q, KL_FLOOR))
    return (plogp - cross).sum() * (1.0 / pd.shape[0])


def _safe(p: Tensor) -> Tensor:
    # replace exact zeros by one (their contribution is multiplied by p = 0 anyway)
    mask = (p.data <= 0).astype(np.float64)
    return p + Tensor(mask)


def mse(f: Tensor, f_corr: Tensor) -> Tensor:
    if f.shape != f_corr.shape:
        raise ad.DimensionError(f"mse shape mismatch: {f.shape} vs {f_corr.shape}")
    diff = f - f_corr
    return (diff * diff).mean()


@dataclass
class LossTerms:
    total: Tensor
    ce_clean: float
    ce_dist: float
    kl: float
    mse: float

    def as_record(self) -> dict:
        return {
            "ce_clean": self.ce_clean,
            "ce_dist": self.ce_dist,
            "kl": self.kl,
            "mse": self.mse,
            "total": self.total.item(),
        }


def joint_loss(
    out: ForwardOutputs,
    y,
    w: LossWeights,
    opts: LossOptions = LossOptions(),
    kl_target: np.ndarray | None = None,
) -> LossTerms:
    """CE(clean) [+ CE(distorted)] + alpha * KL + beta * MSE.

    ``kl_target`` pins the detached KL target to a fixed distribution; finite
    difference checks need this so perturbations do not move a constant.
    """
    ce_clean = cross_entropy(out.logits_clean, y)
    total = ce_clean
    ce_dist_val = 0.0
    if opts.ce_on_distorted:
        ce_dist = cross_entropy(out.logits_dist, y)
        total = total + ce_dist
        ce_dist_val = ce_dist.item()

    kl_val = 0.0
    if w.alpha > 0:
        p_clean = ad.softmax(out.logits_clean, axis=-1)
        p_dist = ad.softmax(out.logits_dist, axis=-1)
        target, q = (p_dist, p_clean) if opts.kl_reverse else (p_clean, p_dist)
        if kl_target is not None:
            target = Tensor(kl_target)
        elif opts.kl_detach_target:
            target = target.detach()
        kl = kl_divergence(target, q)
        total = total + kl * w.alpha
        kl_val = kl.item()

    mse_val = 0.0
    if w.beta > 0:
        f = out.f.detach() if opts.mse_detach_clean else out.f
        m = mse(f, out.f_corr)
        total = total + m * w.beta
        mse_val = m.item()

    return LossTerms(total, ce_clean.item(), ce_dist_val, kl_val, mse_val)
