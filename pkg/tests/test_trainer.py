import json
import math

import numpy as np
import pytest

from conftest import small_config
from lpt.config import ConfigError
from lpt.data import AugConfig
from lpt.losses import LossWeights
from lpt.model import LPTModel, ViTConfig
from lpt.trainer import NonFiniteLossError, TrainConfig, run_training, train


def _read_jsonl(path):
    return [json.loads(line) for line in path.read_text().splitlines()]


class TestTrainConfig:
    def test_defaults(self):
        c = TrainConfig()
        assert (c.epochs, c.lr, c.weight_decay) == (5, 2e-4, 5e-4)

    @pytest.mark.parametrize("kw", [{"epochs": 0}, {"lr": 0.0}, {"batch_size": 0}, {"schedule": "step"}])
    def test_invalid(self, kw):
        with pytest.raises(ConfigError):
            TrainConfig(**kw)


def test_epoch_bookkeeping(tiny_corpus, tmp_path):
    # 10 images, B=3 -> ceil(10/3) = 4 steps per epoch
    cfg = small_config(train={"epochs": 2, "batch_size": 3})
    res = run_training(cfg, tiny_corpus, tmp_path, seed=1)
    recs = _read_jsonl(tmp_path / "logs" / "train.jsonl")
    assert [r["step"] for r in recs] == list(range(8)) and res.steps == 8
    assert set(recs[0]) == {"step", "lr", "ce_clean", "ce_dist", "kl", "mse", "total"}
    lrs = [r["lr"] for r in recs]
    assert lrs[0] == 2e-4 and all(a >= b for a, b in zip(lrs, lrs[1:]))
    assert (tmp_path / "config.resolved.json").is_file()
    assert (tmp_path / "checkpoints" / "last.lptc").is_file()
    assert (tmp_path / "checkpoints" / "best.lptc").is_file()
    assert (tmp_path / "reports").is_dir()
    assert [v["epoch"] for v in _read_jsonl(tmp_path / "logs" / "val.jsonl")] == [0, 1]


def test_loss_decreases(tiny_corpus, tmp_path):
    cfg = small_config(train={"epochs": 30, "batch_size": 10, "lr": 2e-3})
    recs = run_training(cfg, tiny_corpus, tmp_path, seed=2).records
    k = max(1, len(recs) // 10)
    first = np.mean([r["total"] for r in recs[:k]])
    last = np.mean([r["total"] for r in recs[-k:]])
    assert last < first


def test_validation_and_best_checkpoint(tiny_corpus, tmp_path):
    cfg = small_config(train={"epochs": 3, "batch_size": 10, "lr": 3e-3})
    res = run_training(cfg, tiny_corpus, tmp_path, seed=0, val_index=tiny_corpus)
    val = _read_jsonl(tmp_path / "logs" / "val.jsonl")
    assert len(val) == 3 and all(0.0 <= v["auc"] <= 1.0 for v in val)
    best = max(range(3), key=lambda i: (val[i]["auc"], -i))
    assert res.best_epoch == best


def test_byte_identical_reruns(tiny_corpus, tmp_path):
    cfg = small_config(train={"epochs": 1, "batch_size": 4})
    for name in ("a", "b"):
        run_training(cfg, tiny_corpus, tmp_path / name, seed=42)
    for rel in ("checkpoints/last.lptc", "logs/train.jsonl", "config.resolved.json"):
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()
    run_training(cfg, tiny_corpus, tmp_path / "c", seed=43)
    assert (tmp_path / "c" / "checkpoints/last.lptc").read_bytes() != (tmp_path / "a" / "checkpoints/last.lptc").read_bytes()


def test_lora_mode_freezes_backbone(tiny_corpus):
    model = LPTModel(ViTConfig.toy(dim=32, depth=1, heads=2, lora_rank=8, mode="lora"), seed=0)
    before = {n: p.data.copy() for n, p in model.named_parameters().items()}
    aug = AugConfig(image_size=64, distortion=False)
    train(tiny_corpus, model, TrainConfig(epochs=1, batch_size=5, lr=1e-2), LossWeights(), aug)
    for p in model.backbone_params():
        np.testing.assert_array_equal(p.data, before[p.name])
    assert all(not np.array_equal(p.data, before[p.name]) for p in model.adapter_params())


def test_non_finite_loss_aborts_with_dump(tiny_corpus, tmp_path):
    model = LPTModel(ViTConfig.toy(dim=32, depth=1, heads=2, lora_rank=8), seed=0)
    model.head.W.data[:] = np.nan
    aug = AugConfig.from_config(small_config())
    with pytest.raises(NonFiniteLossError):
        train(tiny_corpus, model, TrainConfig(epochs=1, batch_size=2), LossWeights(), aug, out_dir=tmp_path)
    dumps = list((tmp_path / "reports").glob("nonfinite_step*.json"))
    assert len(dumps) == 1
    report = json.loads(dumps[0].read_text())
    assert report["step"] == 0 and len(report["pipelines"]) == 2
    assert all("specs" in p and "seed" in p for p in report["pipelines"])


def test_single_ce_reading(tiny_corpus, tmp_path):
    cfg = small_config(train={"epochs": 1, "batch_size": 5, "ce_on_distorted": False}, loss={"alpha": 0.0, "beta": 0.0})
    recs = run_training(cfg, tiny_corpus, tmp_path, seed=0).records
    assert all(r["ce_dist"] == 0.0 and math.isclose(r["total"], r["ce_clean"]) for r in recs)
