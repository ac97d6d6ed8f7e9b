"""Desk-scale end-to-end experiment shared by the acceptance checks.

Generates the default chair dataset, trains the full model and its ablations,
and caches everything under FEATFIELD_ACCEPT_DIR (default
~/.cache/featfield/acceptance) keyed by a hash of the configuration, so the
acceptance checks can be rerun without retraining. FEATFIELD_FRESH=1 forces
regeneration and retraining.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import shutil
import time
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

import featfield
from featfield.synthscene import generate_dataset
from featfield.training import TrainConfig, load_dataset, load_trained, train

log = logging.getLogger("featfield.e2e")

DATASET = {"category": "chair", "n_instances": 24, "n_views_train": 24, "image_size": 128, "seed": 0}

# Reduced schedule: the default 4x1024 rays x 64 samples x 20k steps is ~60 h on one core.
SCHEDULE = {"steps": 2400, "rays_per_object": 256, "n_samples": 32, "lr": 5e-4,
            "near": 1.1, "far": 2.9, "log_every": 100, "ckpt_every": 400}

RUNS = {
    "full": {},
    "no_coord": {"coord_on": False},
    "rgb_only": {"distill_on": False, "coord_on": False},
}

COND_VIEW = 0
HELD_OUT_VIEWS = (6, 12, 18)
EVAL_PAIRS = 20
EVAL_SEED = 0


def _hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()[:16]


def cache_root() -> Path:
    root = os.environ.get("FEATFIELD_ACCEPT_DIR")
    return Path(root) if root else Path.home() / ".cache" / "featfield" / "acceptance"


def _fresh() -> bool:
    return os.environ.get("FEATFIELD_FRESH", "") not in ("", "0")


_refreshed: set = set()


def _stale(path: Path, key: str) -> bool:
    """True when ``path`` must be (re)built; FEATFIELD_FRESH rebuilds once per process."""
    if _fresh() and key not in _refreshed:
        _refreshed.add(key)
        if path.exists():
            shutil.rmtree(path)
        return True
    return not (path / "DONE").is_file()


def dataset_dir() -> Path:
    key = _hash({"dataset": DATASET, "version": featfield.__version__})
    path = cache_root() / f"data_{key}"
    if _stale(path, key):
        t0 = time.perf_counter()
        generate_dataset(DATASET["category"], DATASET["n_instances"], DATASET["n_views_train"], path,
                         seed=DATASET["seed"], image_size=DATASET["image_size"])
        (path / "DONE").write_text(f"{time.perf_counter() - t0:.1f}\n")
    return path


def run_config(name: str) -> TrainConfig:
    return TrainConfig(**SCHEDULE, **RUNS[name])


def run_dir(name: str) -> tuple[Path, str]:
    cfg = run_config(name)
    key = _hash({"train": cfg.to_dict(), "dataset": DATASET, "version": featfield.__version__})
    return cache_root() / f"run_{name}_{key}", key


def trained_model(name: str):
    """(net, config, training seconds) for one of RUNS, training on first use."""
    path, key = run_dir(name)
    if _stale(path, key):
        ds = load_dataset(dataset_dir(), "train")
        cfg = run_config(name)
        cfg.field.d_teacher = ds.d_teacher
        t0 = time.perf_counter()
        with threadpool_limits(limits=1):
            train(ds, cfg, path)
        (path / "DONE").write_text(f"{time.perf_counter() - t0:.1f}\n")
    net, cfg = load_trained(path / "checkpoint.ffck")
    return net, cfg, float((path / "DONE").read_text())


def loss_trace(name: str) -> dict:
    from featfield.losses import read_loss_log

    path, _ = run_dir(name)
    return read_loss_log(path / "train_log.csv")


def held_out_split():
    return load_dataset(dataset_dir(), "test", with_teacher=False)


def psnr(pred: np.ndarray, gt: np.ndarray) -> float:
    mse = float(np.mean((np.asarray(pred, np.float64) - np.asarray(gt, np.float64)) ** 2))
    return 10.0 * np.log10(1.0 / max(mse, 1e-12))
