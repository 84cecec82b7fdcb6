"""Command-line entry point: distort, train, eval, gradcheck, synth."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, dump_json, hash64, load_config
from .data import load_manifest, write_manifest
from .distortions import (
    DistortionPipeline,
    LevelSampler,
    child_seed,
    compose_pipeline,
    distort,
    get_profile,
)
from .imageio import ImageDecodeError, read_image, write_ppm
from .size_augment import SizeAugConfig, random_crop_resize

log = logging.getLogger("lpt")

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2


def worker_count() -> int:
    raw = os.environ.get("LPT_THREADS")
    if raw:
        try:
            n = int(raw)
        except ValueError as exc:
            raise ConfigError(f"LPT_THREADS must be an integer, got {raw!r}") from exc
        if n < 1:
            raise ConfigError(f"LPT_THREADS must be >= 1, got {n}")
        return n
    return os.cpu_count() or 1


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _seed(text: str) -> int:
    v = int(text)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError(f"seed must be a u64, got {text}")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="lpt", description="Pairwise clean/distorted training toolkit for AI-generated image detection.")
    sub = p.add_subparsers(dest="command", metavar="{distort,train,eval,gradcheck,synth}", parser_class=_Parser)
    sub.required = True

    d = sub.add_parser("distort", help="apply sampled or fixed distortion pipelines to a manifest")
    d.add_argument("--manifest", required=True)
    d.add_argument("--out-dir", "--out", dest="out", required=True)
    d.add_argument("--seed", type=_seed, default=0)
    d.add_argument("--config")
    d.add_argument("--data-root")
    d.add_argument("--mu", type=float)
    d.add_argument("--sigma", type=float)
    d.add_argument("--kmin", type=int)
    d.add_argument("--kmax", type=int)
    d.add_argument("--profile", help="fixed evaluation profile, e.g. tab7-jpeg50, tab7-blur, tab7-noise, hard")
    d.add_argument("--pipeline", help="JSON pipeline {seed, specs} or JSON-lines of per-image pipelines")
    d.add_argument("--size-aug", choices=("on", "off"), default="off")

    t = sub.add_parser("train", help="pairwise training run")
    t.add_argument("--config")
    t.add_argument("--manifest", required=True)
    t.add_argument("--val-manifest")
    t.add_argument("--data-root")
    t.add_argument("--out", required=True)
    t.add_argument("--seed", type=_seed, default=None)

    e = sub.add_parser("eval", help="per-profile accuracy/AUC report")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--manifest", required=True)
    e.add_argument("--data-root")
    e.add_argument("--profiles", default="clean,jpeg50,blur7,noise25,hard")
    e.add_argument("--out", required=True)
    e.add_argument("--seed", type=_seed, default=0)
    e.add_argument("--no-corrector", action="store_true", help="bypass the feature corrector at inference")
    e.add_argument("--threshold", type=float, default=0.5)

    g = sub.add_parser("gradcheck", help="finite-difference check of the full loss")
    g.add_argument("--toy", action="store_true", help="use the small preset (default)")
    g.add_argument("--seed", type=_seed, default=0)
    g.add_argument("--tol", type=float, default=1e-4)

    s = sub.add_parser("synth", help="generate the synthetic real/fake corpus")
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--out-dir", "--out", dest="out", required=True)
    s.add_argument("--seed", type=_seed, default=0)
    return p


# ---------------------------------------------------------------- subcommands


def _read_pipelines(path: str) -> list[DistortionPipeline]:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read pipeline file {path}: {exc}") from exc
    try:
        stripped = text.strip()
        if stripped.startswith("{") and "\n{" not in stripped:
            return [DistortionPipeline.from_json(json.loads(stripped))]
        return [DistortionPipeline.from_json(json.loads(line)) for line in text.splitlines() if line.strip()]
    except (KeyError, ValueError, TypeError) as exc:
        raise ConfigError(f"bad pipeline file {path}: {exc}") from exc


def cmd_distort(args) -> int:
    overrides: dict = {"distortion": {}}
    for key in ("mu", "sigma", "kmin", "kmax"):
        if getattr(args, key) is not None:
            overrides["distortion"][key] = getattr(args, key)
    cfg = load_config(args.config, overrides)
    d = cfg["distortion"]
    index = load_manifest(args.manifest, args.data_root)
    profile = get_profile(args.profile) if args.profile else None
    fixed = _read_pipelines(args.pipeline) if args.pipeline else None
    if fixed is not None and len(fixed) not in (1, len(index)):
        raise ConfigError(f"pipeline file has {len(fixed)} entries for {len(index)} images")
    if profile is not None and fixed is not None:
        raise ConfigError("--profile and --pipeline are mutually exclusive")
    sampler = LevelSampler(d["mu"], d["sigma"], d["levels"])
    size_cfg = SizeAugConfig(**{k: cfg["size_aug"][k] for k in ("tgt", "T1", "T2")}) if args.size_aug == "on" else None

    out = Path(args.out)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "config.resolved.json").write_text(dump_json({**cfg, "seed": args.seed}))
    rows, records = [], []
    for i, entry in enumerate(index.entries):
        img = read_image(entry.path)
        if size_cfg is not None:
            img = random_crop_resize(img, size_cfg, np.random.default_rng(hash64(args.seed, i, 2)))
        rec = {"index": i, "source": str(entry.path)}
        if profile is not None:
            img = profile.apply(img, hash64(args.seed, i))
            rec["profile"] = profile.name
        else:
            if fixed is not None:
                pipe = fixed[i] if len(fixed) > 1 else DistortionPipeline(fixed[0].specs, child_seed(fixed[0].seed, i))
            else:
                rng = np.random.default_rng(hash64(args.seed, i))
                pipe = compose_pipeline(d["catalog"], (d["kmin"], d["kmax"]), sampler, rng, seed=hash64(args.seed, i, 1))
            img = distort(img, pipe, d["tables"])
            rec.update(pipe.to_json())
        name = f"images/{i:05d}_{entry.path.stem}.ppm"
        write_ppm(out / name, img)
        rows.append((name, entry.label))
        records.append(rec)
    write_manifest(out / "manifest.csv", rows)
    with (out / "pipelines.jsonl").open("w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    print(f"wrote {len(rows)} images to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .trainer import run_training

    cfg = load_config(args.config)
    seed = args.seed if args.seed is not None else int(cfg.get("seed", 0))
    index = load_manifest(args.manifest, args.data_root)
    val = load_manifest(args.val_manifest, args.data_root) if args.val_manifest else None
    res = run_training(cfg, index, args.out, seed, val_index=val, workers=worker_count())
    last = res.records[-1] if res.records else {}
    print(f"trained {res.steps} steps; final loss {last.get('total', float('nan')):.6f}; best epoch {res.best_epoch}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .metrics import evaluate
    from .model import load_checkpoint

    profiles = [get_profile(p.strip()) for p in args.profiles.split(",") if p.strip()]
    index = load_manifest(args.manifest, args.data_root)
    model, _ = load_checkpoint(args.checkpoint)
    report = evaluate(
        model,
        index,
        profiles,
        use_corrector=not args.no_corrector,
        threshold=args.threshold,
        seed=args.seed,
        workers=worker_count(),
    )
    out = Path(args.out)
    (out / "reports").mkdir(parents=True, exist_ok=True)
    (out / "reports" / "metrics.json").write_text(report.dumps())
    (out / "reports" / "metrics.txt").write_text(report.table())
    print(report.table(), end="")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import model_gradcheck

    err = model_gradcheck(seed=args.seed)
    ok = err <= args.tol
    print(f"max relative error {err:.3e} ({'ok' if ok else 'FAILED'}, tol {args.tol:g})")
    return EXIT_OK if ok else EXIT_RUNTIME


def cmd_synth(args) -> int:
    from .synth import synth

    if args.n < 2:
        raise ConfigError(f"--n must be >= 2, got {args.n}")
    manifest = synth(args.n, args.out, args.seed)
    print(f"wrote {2 * args.n} images and {manifest}")
    return EXIT_OK


COMMANDS = {
    "distort": cmd_distort,
    "train": cmd_train,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "synth": cmd_synth,
}


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"lpt {args.command}: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ImageDecodeError, OSError, RuntimeError, ValueError) as exc:
        print(f"lpt {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
