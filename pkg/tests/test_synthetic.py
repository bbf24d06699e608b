import json
from pathlib import Path

import numpy as np
import pytest

from phenomap.config import ConfigError
from phenomap.fractions import ClassMapping, compute_fractions
from phenomap.synthetic import (
    SceneDataset,
    SceneRecipe,
    gen_scene,
    phase_profiles,
    split_for,
    write_dataset,
)

from conftest import tiny_config


def _recipe(**overrides):
    cfg = tiny_config(**overrides)
    return SceneRecipe.from_config(cfg)


def test_same_recipe_same_bytes():
    recipe = _recipe()
    a, b = gen_scene(recipe, 3), gen_scene(recipe, 3)
    assert np.array_equal(a.label_map, b.label_map)
    for k in a.images:
        assert a.images[k].tobytes() == b.images[k].tobytes()


def test_different_tiles_differ():
    recipe = _recipe()
    a, b = gen_scene(recipe, 0), gen_scene(recipe, 1)
    assert not np.array_equal(a.label_map, b.label_map) or not np.array_equal(
        a.images["sentinel2"], b.images["sentinel2"]
    )


def test_noise_free_pixels_follow_class_profiles_exactly():
    recipe = _recipe(data={"tiles": 2, "classes": 3, "noise": 0.0, "cadences": {"sentinel2": 16}})
    sample = gen_scene(recipe, 0)
    clip = sample.images["sentinel2"].astype(np.float64)  # [C, T, H, W]
    prof = recipe.profiles["sentinel2"]
    t = np.arange(16)
    for cls in range(3):
        ys, xs = np.nonzero(sample.label_map == cls)
        assert len(ys) > 0
        y, x = ys[0], xs[0]
        for band in range(clip.shape[0]):
            want = prof.offset[cls, band] + prof.amplitude[cls, band] * np.sin(
                2 * np.pi * t / 16 + prof.phase[cls]
            )
            assert np.allclose(clip[band, :, y, x], want, atol=1e-6)


def test_fraction_self_consistency():
    recipe = _recipe(data={"tiles": 2, "classes": 3, "cadences": {"sentinel2": 16}})
    sample = gen_scene(recipe, 5)
    want = compute_fractions(sample.label_map, ClassMapping.identity(3))
    assert np.array_equal(sample.fraction.values, want.values)


def test_coarse_source_is_block_mean_of_fine_signal():
    recipe = _recipe(
        sources=[
            {"name": "sentinel2", "bands": 2, "tile_size": 64},
            {"name": "modis", "bands": 2, "tile_size": 32},
        ],
        data={"tiles": 1, "classes": 2, "noise": 0.0, "cadences": {"sentinel2": 8, "modis": 8}},
    )
    # make both profiles identical so fine and coarse share the latent signal
    recipe = SceneRecipe(
        seed=recipe.seed,
        sources=recipe.sources,
        cadences=recipe.cadences,
        classes=recipe.classes,
        noise=0.0,
        profiles={"sentinel2": recipe.profiles["sentinel2"], "modis": recipe.profiles["sentinel2"]},
    )
    sample = gen_scene(recipe, 0)
    fine = sample.images["sentinel2"].astype(np.float64)
    coarse = sample.images["modis"].astype(np.float64)
    blocked = fine.reshape(2, 8, 32, 2, 32, 2).mean(axis=(-3, -1))
    assert np.allclose(coarse, blocked, atol=1e-5)


def test_phase_profiles_share_time_means():
    recipe = _recipe(data={"tiles": 1, "classes": 2, "noise": 0.0, "profile": "phase", "cadences": {"sentinel2": 16}})
    prof = recipe.profiles["sentinel2"]
    assert np.allclose(prof.offset[0], prof.offset[1])
    assert np.allclose(prof.amplitude[0], prof.amplitude[1])
    assert prof.phase[0] != prof.phase[1]


def test_nearest_profile_classifier_hits_ceiling_without_noise():
    recipe = _recipe(data={"tiles": 1, "classes": 3, "noise": 0.0, "cadences": {"sentinel2": 16}})
    sample = gen_scene(recipe, 2)
    clip = sample.images["sentinel2"].astype(np.float64)  # [C, T, H, W]
    prof = recipe.profiles["sentinel2"]
    t = np.arange(16)
    templates = prof.offset[:, :, None] + prof.amplitude[:, :, None] * np.sin(
        2 * np.pi * t[None, None, :] / 16 + prof.phase[:, None, None]
    )  # [classes, bands, T]
    flat = clip.reshape(clip.shape[0] * 16, -1).T  # [pixels, bands*T]
    dists = ((flat[:, None, :] - templates.reshape(3, -1)[None, :, :]) ** 2).sum(-1)
    pred = dists.argmin(axis=1).reshape(sample.label_map.shape)
    assert np.array_equal(pred, sample.label_map)


def test_worker_count_independence(tmp_path):
    recipe = _recipe(data={"tiles": 6, "classes": 2, "cadences": {"sentinel2": 16}})
    d1, d2 = tmp_path / "w1", tmp_path / "w4"
    write_dataset(recipe, 6, d1, workers=1, min_len=16)
    write_dataset(recipe, 6, d2, workers=4, min_len=16)
    files1 = sorted(p.relative_to(d1) for p in d1.rglob("*") if p.is_file())
    files2 = sorted(p.relative_to(d2) for p in d2.rglob("*") if p.is_file())
    assert files1 == files2
    for rel in files1:
        assert (d1 / rel).read_bytes() == (d2 / rel).read_bytes(), rel


def test_dataset_reader_round_trip(tmp_path, small_dataset):
    cfg, root = small_dataset
    ds = SceneDataset(root)
    gid = ds.geo_ids("train")[0]
    clip = ds.load_clip(gid, "sentinel2")
    assert clip.shape == (4, 16, 32, 32) and clip.dtype == np.float32
    label = ds.load_label(gid)
    assert label.shape == (32, 32)
    recipe = SceneRecipe.from_config(cfg)
    regenerated = gen_scene(recipe, 0)
    assert np.array_equal(regenerated.images["sentinel2"], clip)
    assert np.array_equal(regenerated.label_map, label)
    assert ds.sequence_length(gid, "sentinel2") == 16


def test_split_assignment_proportions():
    splits = [split_for(i, 10, 0.2, 0.2) for i in range(10)]
    assert splits.count("train") == 6 and splits.count("val") == 2 and splits.count("test") == 2


def test_recipe_validation():
    with pytest.raises(ConfigError, match="divide"):
        _recipe(
            sources=[
                {"name": "sentinel2", "bands": 2, "tile_size": 96},
                {"name": "modis", "bands": 2, "tile_size": 64},
            ],
            data={"tiles": 1, "classes": 2, "cadences": {"sentinel2": 8, "modis": 8}},
        )
    with pytest.raises(ConfigError, match="cadence"):
        SceneRecipe(seed=0, sources=tiny_config().sources, cadences={}, classes=2)


def test_scene_header_format(small_dataset):
    _, root = small_dataset
    header = json.loads((Path(root) / "scenes" / "g00000" / "sentinel2.json").read_text())
    assert header["shape"] == [4, 16, 32, 32]
    assert header["order"] == "CTHW"
    assert header["byteorder"] == "little"
    assert header["dtype"] == "float32"
