"""End-to-end acceptance checks. Each test prints one PASS/FAIL line."""

import json
import time

import numpy as np
import pytest
from scipy.stats import norm

from lpt import autodiff as ad
from lpt.cli import main
from lpt.data import load_manifest
from lpt.distortions import LevelSampler, distort_many, sample_level
from lpt.imageio import encode_ppm
from lpt.metrics import auc, evaluate
from lpt.model import LPTModel, ViTConfig, load_checkpoint
from lpt.size_augment import SizeAugConfig, apply_plan, plan_crop_resize
from lpt.synth import synth
from test_distortions import GOLDEN, golden_cases

PROFILES = ["clean", "jpeg50", "blur7", "noise25", "hard"]
TREND_SEEDS = (7, 8, 9)
ABLATIONS = {
    "a_ce": {"alpha": 0.0, "beta": 0.0},
    "b_ce_kl": {"alpha": 0.5, "beta": 0.0},
    "c_ce_kl_mse": {"alpha": 0.5, "beta": 0.25},
}


@pytest.fixture
def report(capsys):
    def emit(number, ok, detail):
        with capsys.disabled():
            print(f"\n[{'PASS' if ok else 'FAIL'}] criterion {number}: {detail}")
        return ok

    return emit


def test_c01_gradient_integrity(report, capsys):
    t0 = time.perf_counter()
    rc = main(["gradcheck", "--toy"])
    elapsed = time.perf_counter() - t0
    out = capsys.readouterr().out
    err = float(out.split("error")[1].split()[0])
    ok = rc == 0 and err <= 1e-4 and elapsed < 60
    assert report(1, ok, f"max rel error {err:.2e} (<= 1e-4) in {elapsed:.1f}s (< 60s)")


def test_c02_lora_identity(report):
    model = LPTModel(ViTConfig.toy(), seed=21)
    x = np.random.default_rng(21).uniform(-1, 1, (100, 3, 64, 64))
    with ad.no_grad():
        adapted = model.logits(x, use_lora=True).data
        base = model.logits(x, use_lora=False).data
    ok = np.array_equal(adapted, base)
    assert report(2, ok, "fresh adapters reproduce base logits bit-exactly on 100 inputs")


def test_c03_corrector_identity(report):
    model = LPTModel(ViTConfig.toy(), seed=22)
    f = ad.Tensor(np.random.default_rng(22).normal(size=(100, 64)))
    ok = np.array_equal(model.correct(f).data, f.data) and model.corrector.hidden_dim == 128
    assert report(3, ok, f"corrector identity on 100 vectors; hidden width {model.corrector.hidden_dim}")


def test_c04_level_sampler(report):
    t0 = time.perf_counter()
    pdf = norm.pdf(np.arange(1, 6), loc=3, scale=1)
    oracle = pdf / pdf.sum()
    stated = np.array([0.0545, 0.2442, 0.4026, 0.2442, 0.0545])
    assert np.allclose(oracle, stated, atol=5e-5)
    rng = np.random.default_rng(4)
    sampler = LevelSampler(3.0, 1.0)
    draws = np.array([sample_level(sampler, rng) for _ in range(100_000)])
    emp = np.bincount(draws, minlength=6)[1:] / draws.size
    tv = 0.5 * np.abs(emp - oracle).sum()
    elapsed = time.perf_counter() - t0
    ok = tv <= 0.01 and elapsed < 5
    assert report(4, ok, f"TV distance {tv:.4f} (<= 0.01) in {elapsed:.2f}s (< 5s)")


def _coordinate_raster(h, w):
    yy, xx = np.mgrid[0:h, 0:w]
    return np.stack([yy, xx], axis=-1)


def test_c05_crop_resize_conformance(report):
    cfg = SizeAugConfig(tgt=224, T1=0.3, T2=0.3)
    rng = np.random.default_rng(5)
    src = _coordinate_raster(300, 260)
    n = 100_000
    counts = {"crop": 0, "resize": 0, "identity": 0}
    bad = 0
    for _ in range(n):
        plan = plan_crop_resize(src.shape, cfg, rng)
        counts[plan.branch] += 1
        if plan.branch == "crop":
            out = apply_plan(src, plan)
            h, w = out.shape[:2]
            bad += h > cfg.tgt or w > cfg.tgt
            bad += not (out[0, 0, 0] == plan.top and out[0, 0, 1] == plan.left)
            bad += not (out[-1, -1, 0] == plan.top + h - 1 and out[-1, -1, 1] == plan.left + w - 1)
        elif plan.branch == "resize":
            bad += (plan.out_h, plan.out_w) != (150, 130)

    # sub-target height: top must come from randint(0, 0)
    small = _coordinate_raster(100, 400)
    tops = set()
    for _ in range(2_000):
        plan = plan_crop_resize(small.shape, cfg, rng)
        if plan.branch == "crop":
            out = apply_plan(small, plan)
            tops.add(plan.top)
            bad += out.shape[0] != 100 or not np.array_equal(out, small[:, plan.left : plan.left + plan.crop_w])

    f_crop, f_resize = counts["crop"] / n, counts["resize"] / n
    ok = abs(f_crop - 0.3) <= 0.01 and abs(f_resize - 0.7 * 0.25) <= 0.01 and bad == 0 and tops == {0}
    assert report(5, ok, f"crop {f_crop:.4f} (0.3), resize {f_resize:.4f} (0.175), violations {bad}, sub-tgt tops {sorted(tops)}")


def test_c06_golden_determinism(report, checker8):
    cases = golden_cases(checker8)
    names = sorted(cases)
    ok = True
    for workers in (1, 4, 8):
        for _ in range(2):
            outs = distort_many([cases[k][0] for k in names], [cases[k][1] for k in names], workers=workers)
            for name, img in zip(names, outs):
                ok &= encode_ppm(img) == (GOLDEN / f"{name}.ppm").read_bytes()
    assert report(6, ok, f"{len(names)} goldens byte-exact across 2 runs x workers 1/4/8")


def test_c07_auc_oracle(report):
    rng = np.random.default_rng(7)
    mismatches = 0
    for _ in range(1000):
        n_pos, n_neg = rng.integers(1, 201, size=2)
        y = rng.permutation(np.r_[np.ones(n_pos, int), np.zeros(n_neg, int)])
        s = rng.integers(0, rng.integers(2, 40), y.size) / 7.0 if rng.random() < 0.5 else rng.random(y.size)
        pos, neg = s[y == 1][:, None], s[y == 0][None, :]
        brute = ((pos > neg).sum() + 0.5 * (pos == neg).sum()) / (n_pos * n_neg)
        mismatches += auc(s, y) != brute
    invariance_fail = 0
    for _ in range(100):
        y = rng.permutation(np.r_[np.ones(50, int), np.zeros(50, int)])
        s = rng.integers(0, 30, 100).astype(float)
        grid = np.unique(s)
        image = np.cumsum(rng.uniform(1e-3, 3.0, grid.size)) + rng.normal()
        invariance_fail += auc(image[np.searchsorted(grid, s)], y) != auc(s, y)
    ok = mismatches == 0 and invariance_fail == 0
    assert report(7, ok, f"{mismatches} brute-force mismatches / 1000, {invariance_fail} invariance failures / 100")


# ---------------------------------------------------------------- training trend


@pytest.fixture(scope="module")
def trend_runs(tmp_path_factory):
    """Train the three loss ablations for each seed on the synthetic corpus."""
    root = tmp_path_factory.mktemp("trend")
    t0 = time.perf_counter()
    train_manifest = synth(500, root / "train", seed=7)
    test_manifest = synth(250, root / "heldout", seed=1007)
    test_index = load_manifest(test_manifest)
    cache: dict = {}
    results = {}
    for tag, weights in ABLATIONS.items():
        cfg_path = root / f"{tag}.json"
        cfg_path.write_text(json.dumps({"loss": weights, "train": {"epochs": 5, "batch_size": 16}}))
        for seed in TREND_SEEDS:
            out = root / f"{tag}_s{seed}"
            rc = main(["train", "--config", str(cfg_path), "--manifest", str(train_manifest), "--out", str(out), "--seed", str(seed)])
            assert rc == 0
            model, _ = load_checkpoint(out / "checkpoints" / "last.lptc")
            results[(tag, seed)] = evaluate(model, test_index, PROFILES, seed=0, cache=cache)
    return {
        "results": results,
        "root": root,
        "test_manifest": test_manifest,
        "elapsed": time.perf_counter() - t0,
    }


def _mean(results, tag, profile):
    return float(np.mean([results[(tag, s)].per_profile[profile].auc for s in TREND_SEEDS]))


@pytest.mark.slow
def test_c08_end_to_end_trend(report, trend_runs):
    res = trend_runs["results"]
    hard = {tag: _mean(res, tag, "hard") for tag in ABLATIONS}
    clean_c = _mean(res, "c_ce_kl_mse", "clean")
    a, b, c = hard["a_ce"], hard["b_ce_kl"], hard["c_ce_kl_mse"]
    elapsed = trend_runs["elapsed"]
    ok = c >= b >= a - 0.01 and clean_c >= 0.95 and c >= 0.85 and elapsed < 1800
    with_seeds = "; ".join(
        f"{tag} " + "/".join(f"{res[(tag, s)].per_profile['hard'].auc:.4f}" for s in TREND_SEEDS) for tag in ABLATIONS
    )
    detail = (
        f"hard AUC a={a:.4f} b={b:.4f} c={c:.4f} (c >= b >= a-0.01), "
        f"c clean {clean_c:.4f} (>= 0.95), c hard >= 0.85, {elapsed / 60:.1f} min [{with_seeds}]"
    )
    assert report(8, ok, detail)


@pytest.mark.slow
def test_c09_profile_rows(report, trend_runs, capsys):
    ckpt = trend_runs["root"] / "a_ce_s7" / "checkpoints" / "last.lptc"
    out = trend_runs["root"] / "eval_a_ce"
    rc = main(["eval", "--checkpoint", str(ckpt), "--manifest", str(trend_runs["test_manifest"]),
               "--profiles", "clean,tab7-jpeg50,tab7-blur,tab7-noise", "--out", str(out)])
    capsys.readouterr()
    rows = json.loads((out / "reports" / "metrics.json").read_text())["per_profile"]
    names = list(rows)
    clean = rows["clean"]["auc"]
    degraded = {k: rows[k]["auc"] for k in ("jpeg50", "blur7", "noise25")}
    ok = rc == 0 and names == ["clean", "jpeg50", "blur7", "noise25"] and all(clean >= v for v in degraded.values())
    detail = f"rows {names}; clean AUC {clean:.4f} >= " + ", ".join(f"{k} {v:.4f}" for k, v in degraded.items())
    assert report(9, ok, detail)


def test_c10_reproducibility(report, tmp_path):
    manifest = synth(16, tmp_path / "corpus", seed=10)
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"train": {"epochs": 1, "batch_size": 16}}))
    for run in ("r1", "r2"):
        assert main(["train", "--config", str(cfg), "--manifest", str(manifest), "--val-manifest", str(manifest),
                     "--out", str(tmp_path / run), "--seed", "10"]) == 0
    files = ["checkpoints/last.lptc", "checkpoints/best.lptc", "logs/train.jsonl", "logs/val.jsonl"]
    same = [(tmp_path / "r1" / f).read_bytes() == (tmp_path / "r2" / f).read_bytes() for f in files]
    assert report(10, all(same), f"byte-identical {sum(same)}/{len(files)} artefacts across two seeded runs")
