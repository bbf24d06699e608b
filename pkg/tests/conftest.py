"""Shared fixtures: tiny configs and a reusable synthetic dataset."""

import numpy as np
import pytest
import torch

from phenomap.config import from_dict
from phenomap.synthetic import SceneRecipe, write_dataset


def tiny_config(**overrides):
    """Sub-toy config (embed 16, one block per stage) for fast unit tests."""
    raw = {
        "model": {"embed_dim": 16, "depths": [1, 1, 1, 1], "heads": [2, 2, 2, 2]},
        "sources": [{"name": "sentinel2", "bands": 4, "tile_size": 32}],
        "training": {
            "seed": 0,
            "pretrain": {"iterations": 8, "batch_size": 2, "warmup_iterations": 4},
            "finetune": {"epochs": 2, "batch_size": 2, "num_classes": 2, "min_kept": 16},
        },
        "data": {"tiles": 8, "classes": 2, "cadences": {"sentinel2": 16}},
    }
    for key, val in overrides.items():
        if isinstance(val, dict) and isinstance(raw.get(key), dict):
            raw[key].update(val)
        else:
            raw[key] = val
    return from_dict(raw)


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    """8 single-source tiles (32 px, 16 frames) shared across tests."""
    cfg = tiny_config()
    root = tmp_path_factory.mktemp("small_ds")
    write_dataset(SceneRecipe.from_config(cfg), cfg.data.tiles, root, min_len=16)
    return cfg, root


@pytest.fixture(autouse=True)
def _seed_torch():
    torch.manual_seed(0)
    np.random.seed(0)
    yield
