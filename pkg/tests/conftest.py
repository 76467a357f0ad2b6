"""Fixtures, including the session-scoped desk-scale experiment runs.

The desk experiment is expensive (tens of minutes on CPU); it is built once
per session and shared by every acceptance criterion that needs it.
"""

from __future__ import annotations

import json
import time
from pathlib import Path
from types import SimpleNamespace

import pytest
import torch

from helpers import TINY_ARCH, tiny_codec
from rdplab.harness import load_config, manifest_hash, run_experiment
from rdplab.synthetic import generate_images

# Desk-scale budgets: >= 500 training images, 5k RD iterations, 1.5k PD
# iterations per gamma over the six-value sweep, 8 held-out eval images.
DESK_SEED = 1234
DESK_TRAIN_IMAGES = 500
DESK_EVAL_IMAGES = 8
DESK_RD_ITERATIONS = 5000
DESK_PD_ITERATIONS = 1500
DESK_LAMBDA = 0.0025


def desk_config_dict(train_dir: str, eval_dir: str, output_dir: str) -> dict:
    return {
        "schema_version": 1,
        "seed": DESK_SEED,
        "arch": {
            "downsampling_stages": 3,
            "hidden_channels": 64,
            "latent_channels": 96,
            "hyper_channels": 32,
            "hyper_downsampling_stages": 2,
        },
        "lambdas": [DESK_LAMBDA],
        "train": {
            "learning_rate": 1e-4,
            "iterations": DESK_RD_ITERATIONS,
            "batch_size": 8,
            "patch_size": 64,
        },
        "sweep": {
            # the reference ladder under this artifact's loss conventions
            # (one measured balance factor of 2000); 2.0 is the 1e-3 analog
            "gammas": [20.0, 2.0, 1.0, 0.2, 0.1, 0.0],
            "finetune": {
                "learning_rate": 1e-5,
                "iterations": DESK_PD_ITERATIONS,
                "batch_size": 8,
                "patch_size": 64,
            },
        },
        "dataset": {"train_dir": train_dir, "eval_dir": eval_dir},
        "output_dir": output_dir,
        "knee_axis": "psnr",
    }


@pytest.fixture(scope="session")
def desk_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("desk_data")
    generate_images(root / "train", DESK_TRAIN_IMAGES, size=96, seed=10)
    generate_images(root / "eval", DESK_EVAL_IMAGES, size=64, seed=20)
    return root


def _run_desk(desk_dataset: Path, out_dir: Path) -> SimpleNamespace:
    config = desk_config_dict(
        str(desk_dataset / "train"), str(desk_dataset / "eval"), str(out_dir)
    )
    cfg_path = out_dir.parent / f"{out_dir.name}_config.json"
    cfg_path.write_text(json.dumps(config, indent=2))
    cfg = load_config(cfg_path)
    start = time.monotonic()
    manifest = run_experiment(cfg)
    elapsed = time.monotonic() - start
    return SimpleNamespace(
        cfg=cfg,
        manifest=manifest,
        out=out_dir,
        elapsed_seconds=elapsed,
        manifest_hash=manifest_hash(out_dir),
    )


@pytest.fixture(scope="session")
def desk_run(desk_dataset, tmp_path_factory):
    out = tmp_path_factory.mktemp("desk_run") / "out"
    return _run_desk(desk_dataset, out)


@pytest.fixture(scope="session")
def desk_run_twin(desk_dataset, tmp_path_factory):
    out = tmp_path_factory.mktemp("desk_twin") / "out"
    return _run_desk(desk_dataset, out)


@pytest.fixture
def tiny_arch():
    return TINY_ARCH


@pytest.fixture
def codec_tiny():
    return tiny_codec(seed=3)


@pytest.fixture
def image_32():
    gen = torch.Generator().manual_seed(7)
    return torch.rand(1, 3, 32, 32, generator=gen)
