import numpy as np
import pytest


def _natural_64():
    from skimage import data

    img = data.astronaut().astype(np.float64) / 255.0
    # 512 -> 64 by 8x8 box averaging
    return img.reshape(64, 8, 64, 8, 3).mean(axis=(1, 3))


@pytest.fixture(scope="session")
def natural_image():
    return _natural_64()


@pytest.fixture
def checker8():
    yy, xx = np.mgrid[0:8, 0:8]
    board = ((yy + xx) % 2).astype(np.float64)
    return np.repeat(board[..., None], 3, axis=2) * 0.6 + 0.2


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


SMALL_MODEL = {"dim": 32, "depth": 2, "heads": 2, "lora_rank": 8, "lora_scale": 8}


def small_config(**sections):
    """Default config with a 2-block, 32-wide model; ``sections`` overlay per top-level key."""
    from lpt.config import load_config

    overrides = {"model": dict(SMALL_MODEL)}
    for key, value in sections.items():
        overrides.setdefault(key, {}).update(value)
    return load_config(overrides=overrides)


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    """5 real + 5 fake synthetic images."""
    from lpt.data import load_manifest
    from lpt.synth import synth

    return load_manifest(synth(5, tmp_path_factory.mktemp("tiny_corpus"), seed=0))


@pytest.fixture(scope="session")
def memorized(tiny_corpus, tmp_path_factory):
    """Small model overfit on ``tiny_corpus`` with augmentation switched off."""
    from lpt.trainer import run_training

    cfg = small_config(
        train={"lr": 5e-3, "epochs": 80, "batch_size": 10},
        distortion={"enabled": False},
        size_aug={"enabled": False},
    )
    return run_training(cfg, tiny_corpus, tmp_path_factory.mktemp("memorized"), seed=0).model
