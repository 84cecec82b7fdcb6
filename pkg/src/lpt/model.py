"""Toy ViT detector with LoRA-adapted attention/FFN linears and a feature corrector."""

from __future__ import annotations

import io
import json
import math
import struct
from collections import OrderedDict
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .config import ConfigError

CHECKPOINT_MAGIC = b"LPTC"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ViTConfig:
    image_size: int = 224
    patch_size: int = 16
    dim: int = 64
    heads: int = 4
    depth: int = 4
    mlp_ratio: int = 4
    num_classes: int = 2
    channels: int = 3
    lora_rank: int = 16
    lora_scale: float = 16.0
    mode: str = "full"  # "full" trains everything, "lora" freezes the backbone
    ln_eps: float = 1e-5
    init_std: float = 0.02

    def __post_init__(self):
        if self.dim % self.heads:
            raise ConfigError(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.image_size % self.patch_size:
            raise ConfigError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.mode not in ("full", "lora"):
            raise ConfigError(f"mode must be 'full' or 'lora', got {self.mode!r}")

    @classmethod
    def toy(cls, **kw) -> "ViTConfig":
        return cls(**{"image_size": 64, "patch_size": 8, "dim": 64, "heads": 4, "depth": 4, **kw})

    @classmethod
    def tiny(cls, **kw) -> "ViTConfig":
        """Small enough for exhaustive finite-difference checks."""
        base = dict(image_size=16, patch_size=4, dim=16, heads=2, depth=2, mlp_ratio=4, lora_rank=4, lora_scale=4.0)
        return cls(**{**base, **kw})

    @classmethod
    def from_dict(cls, d: dict) -> "ViTConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def num_tokens(self) -> int:
        return self.num_patches + 1


def _normal(rng, shape, std):
    return rng.normal(0.0, std, shape)


class LoRAAdapter:
    """Frozen base linear ``xW + b`` plus a trainable low-rank update ``(s/r)(xA)B``."""

    def __init__(self, d_in, d_out, rank, scale, rng, std=0.02, name=""):
        if rank > min(d_in, d_out):
            raise ConfigError(f"LoRA rank {rank} exceeds min(d_in, d_out) = {min(d_in, d_out)} for {name}")
        self.rank, self.scale = rank, float(scale)
        self.W = Tensor(_normal(rng, (d_in, d_out), std), name=f"{name}.W")
        self.b = Tensor(np.zeros(d_out), name=f"{name}.b")
        self.A = Tensor(_normal(rng, (d_in, rank), std), name=f"{name}.lora_A")
        self.B = Tensor(np.zeros((rank, d_out)), name=f"{name}.lora_B")

    @property
    def multiplier(self) -> float:
        return self.scale / self.rank

    def base_params(self):
        return [self.W, self.b]

    def adapter_params(self):
        return [self.A, self.B]

    def __call__(self, x: Tensor, use_lora: bool = True) -> Tensor:
        return lora_forward(x, self, use_lora)


def lora_forward(x: Tensor, adapter: LoRAAdapter, use_lora: bool = True) -> Tensor:
    """``xW + b + (s/r)(xA)B``, evaluated as ``x(W + (s/r)AB) + b``.

    Folding the update into the weight costs one small d_in x d_out product
    instead of two token-sized ones; with B = 0 the folded weight is W exactly.
    """
    if not use_lora:
        return x @ adapter.W + adapter.b
    w_eff = adapter.W + (adapter.A @ adapter.B) * adapter.multiplier
    return x @ w_eff + adapter.b


class Linear:
    def __init__(self, d_in, d_out, rng, std=0.02, name="", zero=False):
        w = np.zeros((d_in, d_out)) if zero else _normal(rng, (d_in, d_out), std)
        self.W = Tensor(w, name=f"{name}.W")
        self.b = Tensor(np.zeros(d_out), name=f"{name}.b")

    def params(self):
        return [self.W, self.b]

    def __call__(self, x: Tensor) -> Tensor:
        return x @ self.W + self.b


class LayerNorm:
    def __init__(self, d, eps, name=""):
        self.gamma = Tensor(np.ones(d), name=f"{name}.gamma")
        self.beta = Tensor(np.zeros(d), name=f"{name}.beta")
        self.eps = eps

    def params(self):
        return [self.gamma, self.beta]

    def __call__(self, x):
        return ad.layer_norm(x, self.gamma, self.beta, self.eps)


class Block:
    def __init__(self, cfg: ViTConfig, rng, name):
        d, r, s, std = cfg.dim, cfg.lora_rank, cfg.lora_scale, cfg.init_std
        hidden = d * cfg.mlp_ratio
        self.heads = cfg.heads
        self.ln1 = LayerNorm(d, cfg.ln_eps, f"{name}.ln1")
        self.q = LoRAAdapter(d, d, r, s, rng, std, f"{name}.attn.q")
        self.k = LoRAAdapter(d, d, r, s, rng, std, f"{name}.attn.k")
        self.v = LoRAAdapter(d, d, r, s, rng, std, f"{name}.attn.v")
        self.o = LoRAAdapter(d, d, r, s, rng, std, f"{name}.attn.out")
        self.ln2 = LayerNorm(d, cfg.ln_eps, f"{name}.ln2")
        self.fc1 = LoRAAdapter(d, hidden, r, s, rng, std, f"{name}.ffn.fc1")
        self.fc2 = LoRAAdapter(hidden, d, r, s, rng, std, f"{name}.ffn.fc2")

    @property
    def adapters(self):
        return [self.q, self.k, self.v, self.o, self.fc1, self.fc2]

    def base_params(self):
        out = self.ln1.params() + self.ln2.params()
        for a in self.adapters:
            out += a.base_params()
        return out

    def __call__(self, x: Tensor, use_lora=True) -> Tensor:
        x = x + mhsa_forward(self.ln1(x), self, use_lora)
        h = ad.gelu(self.fc1(self.ln2(x), use_lora))
        return x + self.fc2(h, use_lora)


def mhsa_forward(tokens: Tensor, block: Block, use_lora: bool = True) -> Tensor:
    """Multi-head self-attention over ``tokens`` of shape (..., n, d)."""
    *lead, n, d = tokens.shape
    h = block.heads
    dh = d // h

    def split(t):
        return t.reshape(*lead, n, h, dh).transpose(*range(len(lead)), len(lead) + 1, len(lead), len(lead) + 2)

    q = split(block.q(tokens, use_lora))
    k = split(block.k(tokens, use_lora))
    v = split(block.v(tokens, use_lora))
    nd = k.ndim
    kt = k.transpose(*range(nd - 2), nd - 1, nd - 2)
    att = ad.softmax((q @ kt) * (1.0 / math.sqrt(dh)), axis=-1)
    mixed = att @ v
    mixed = mixed.transpose(*range(len(lead)), len(lead) + 1, len(lead), len(lead) + 2).reshape(*lead, n, d)
    return block.o(mixed, use_lora)


class CorrectorFFN:
    """Residual inverted-bottleneck MLP d -> 2d -> d on pooled features.

    The output layer starts at zero, so the map is exactly the identity at
    initialisation while the hidden layer still receives gradient.
    """

    def __init__(self, d, rng, std=0.02, residual=True, name="corrector"):
        self.residual = residual
        self.fc1 = Linear(d, 2 * d, rng, std, f"{name}.fc1")
        self.fc2 = Linear(2 * d, d, rng, std, f"{name}.fc2", zero=True)

    @property
    def hidden_dim(self) -> int:
        return self.fc1.W.shape[1]

    def params(self):
        return self.fc1.params() + self.fc2.params()

    def __call__(self, f: Tensor) -> Tensor:
        update = self.fc2(ad.gelu(self.fc1(f)))
        return f + update if self.residual else update


def correct_features(f_hat: Tensor, corrector: CorrectorFFN) -> Tensor:
    return corrector(f_hat)


def classify(f: Tensor, head: Linear) -> Tensor:
    return head(f)


@dataclass
class ForwardOutputs:
    f: Tensor
    f_corr: Tensor
    logits_clean: Tensor
    logits_dist: Tensor


class LPTModel:
    def __init__(self, cfg: ViTConfig, seed: int = 0):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        d, std = cfg.dim, cfg.init_std
        patch_dim = cfg.channels * cfg.patch_size**2
        self.patch_embed = Linear(patch_dim, d, rng, std, "patch_embed")
        self.cls_token = Tensor(_normal(rng, (1, 1, d), std), name="cls_token")
        self.pos_embed = Tensor(_normal(rng, (1, cfg.num_tokens, d), std), name="pos_embed")
        self.blocks = [Block(cfg, rng, f"blocks.{i}") for i in range(cfg.depth)]
        self.norm = LayerNorm(d, cfg.ln_eps, "norm")
        self.corrector = CorrectorFFN(d, rng, std)
        self.head = Linear(d, cfg.num_classes, rng, std, "head")
        self.use_lora = True
        self.set_mode(cfg.mode)

    # ------------------------------------------------------------ parameters

    def backbone_params(self) -> list[Tensor]:
        out = self.patch_embed.params() + [self.cls_token, self.pos_embed]
        for b in self.blocks:
            out += b.base_params()
        return out + self.norm.params()

    @property
    def adapters(self) -> list[LoRAAdapter]:
        return [a for b in self.blocks for a in b.adapters]

    def adapter_params(self) -> list[Tensor]:
        return [p for a in self.adapters for p in a.adapter_params()]

    def named_parameters(self) -> "OrderedDict[str, Tensor]":
        params = self.backbone_params() + self.adapter_params() + self.corrector.params() + self.head.params()
        return OrderedDict((p.name, p) for p in params)

    def set_mode(self, mode: str):
        if mode not in ("full", "lora"):
            raise ConfigError(f"unknown mode {mode!r}")
        self.mode = mode
        for p in self.backbone_params():
            p.requires_grad = mode == "full"
            p.grad = None
        for p in self.adapter_params() + self.corrector.params() + self.head.params():
            p.requires_grad = True

    def trainable_parameters(self) -> list[Tensor]:
        return [p for p in self.named_parameters().values() if p.requires_grad]

    def num_parameters(self, trainable_only=False) -> int:
        ps = self.trainable_parameters() if trainable_only else self.named_parameters().values()
        return int(sum(p.size for p in ps))

    def zero_grad(self):
        for p in self.named_parameters().values():
            p.grad = None

    # ------------------------------------------------------------ forward

    def patchify(self, x: np.ndarray) -> np.ndarray:
        B, C, S, _ = x.shape
        p = self.cfg.patch_size
        g = S // p
        return x.reshape(B, C, g, p, g, p).transpose(0, 2, 4, 1, 3, 5).reshape(B, g * g, C * p * p)

    def encode(self, x, use_lora: bool | None = None) -> Tensor:
        """Class-token feature of shape (B, d) for inputs of shape (B, C, S, S)."""
        xd = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
        cfg = self.cfg
        if xd.ndim != 4 or xd.shape[1:] != (cfg.channels, cfg.image_size, cfg.image_size):
            raise ad.DimensionError(
                f"encode expects (B, {cfg.channels}, {cfg.image_size}, {cfg.image_size}), got {xd.shape}"
            )
        use_lora = self.use_lora if use_lora is None else use_lora
        B = xd.shape[0]
        tokens = self.patch_embed(Tensor(self.patchify(xd)))
        cls = ad.broadcast_to(self.cls_token, (B, 1, cfg.dim))
        h = ad.concat([cls, tokens], axis=1) + self.pos_embed
        for block in self.blocks:
            h = block(h, use_lora)
        h = self.norm(h)
        return h[:, 0, :]

    def correct(self, f: Tensor) -> Tensor:
        return correct_features(f, self.corrector)

    def classify(self, f: Tensor) -> Tensor:
        return classify(f, self.head)

    def forward_pair(self, x, x_hat) -> ForwardOutputs:
        """Clean and distorted branches; only the distorted features are corrected."""
        B = len(x)
        feats = self.encode(np.concatenate([np.asarray(x), np.asarray(x_hat)], axis=0))
        f = feats[:B]
        f_corr = self.correct(feats[B:])
        return ForwardOutputs(f, f_corr, self.classify(f), self.classify(f_corr))

    def logits(self, x, use_corrector: bool = True, use_lora: bool | None = None) -> Tensor:
        f = self.encode(x, use_lora)
        if use_corrector:
            f = self.correct(f)
        return self.classify(f)

    def predict_proba(self, x, use_corrector: bool = True, batch_size: int = 64) -> np.ndarray:
        """Fake-class probability per input."""
        x = np.asarray(x)
        out = []
        with ad.no_grad():
            for i in range(0, len(x), batch_size):
                out.append(ad.softmax(self.logits(x[i : i + batch_size], use_corrector), axis=-1).data[:, 1])
        return np.concatenate(out) if out else np.zeros(0)


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(path: str | Path, model: LPTModel, extra: dict | None = None) -> None:
    Path(path).write_bytes(checkpoint_bytes(model, extra))


def checkpoint_bytes(model: LPTModel, extra: dict | None = None) -> bytes:
    params = model.named_parameters()
    header = {
        "format": CHECKPOINT_VERSION,
        "model": asdict(model.cfg),
        "mode": model.mode,
        "names": list(params),
        "extra": extra or {},
    }
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<II", CHECKPOINT_VERSION, len(head)))
    buf.write(head)
    for name, p in params.items():
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(ad.tensor_to_bytes(p))
    return buf.getvalue()


def load_checkpoint(path: str | Path) -> tuple[LPTModel, dict]:
    stream = io.BytesIO(Path(path).read_bytes())
    if stream.read(4) != CHECKPOINT_MAGIC:
        raise ValueError(f"{path} is not an LPT checkpoint")
    version, head_len = struct.unpack("<II", stream.read(8))
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint format {version}")
    header = json.loads(stream.read(head_len).decode("utf-8"))
    model = LPTModel(ViTConfig.from_dict(header["model"]))
    params = model.named_parameters()
    for _ in header["names"]:
        (n,) = struct.unpack("<I", stream.read(4))
        name = stream.read(n).decode("utf-8")
        t = ad.read_tensor(stream)
        if name not in params or params[name].shape != t.shape:
            raise ValueError(f"checkpoint tensor {name} {t.shape} does not fit the model")
        params[name].data = t.data.copy()
    model.set_mode(header.get("mode", model.cfg.mode))
    return model, header
