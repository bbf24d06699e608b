import json

import pytest

from phenomap.config import (
    ConfigError,
    ModelConfig,
    SourceSpec,
    config_hash,
    from_dict,
    load_config,
    to_dict,
)


def test_minimal_config_fills_toy_defaults(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps({"sources": [{"name": "sentinel2"}]}))
    cfg = load_config(path)
    assert cfg.model.embed_dim == 32
    assert cfg.model.depths == (2, 2, 2, 2)
    assert cfg.model.heads == (2, 2, 4, 4)
    assert cfg.model.window == (2, 7)
    assert cfg.sources[0].bands == 10  # sentinel2 default
    assert cfg.sources[0].spatial_patch == 4


def test_tile_size_not_divisible_rejected():
    with pytest.raises(ConfigError, match="not divisible by 32"):
        from_dict({"sources": [{"name": "sentinel2", "tile_size": 100}]})


def test_stage_channels_double_per_stage():
    cfg = from_dict(
        {
            "model": {"embed_dim": 128, "depths": [2, 2, 6, 2], "heads": [4, 8, 16, 32]},
            "sources": [{"name": "sentinel2", "tile_size": 224}],
        }
    )
    assert cfg.model.stage_channels == (128, 256, 512, 1024)


def test_default_band_counts():
    cfg = from_dict({"sources": [{"name": "modis"}, {"name": "landsat"}, {"name": "sentinel2"}]})
    assert [s.bands for s in cfg.sources] == [7, 6, 10]


def test_user_defined_source_requires_bands():
    with pytest.raises(ConfigError, match="bands is required"):
        from_dict({"sources": [{"name": "planet"}]})


def test_unknown_field_named_in_error():
    with pytest.raises(ConfigError, match="embed_dims"):
        from_dict({"model": {"embed_dims": 32}, "sources": [{"name": "sentinel2"}]})
    with pytest.raises(ConfigError, match="sources"):
        from_dict({"model": {}})


def test_config_round_trip(tmp_path):
    cfg = from_dict(
        {
            "model": {"embed_dim": 16, "depths": [1, 2, 1, 1], "heads": [2, 2, 2, 2], "hidden_dim": 24},
            "sources": [
                {"name": "sentinel2", "bands": 4, "tile_size": 64},
                {"name": "modis", "bands": 3, "tile_size": 32, "temporal_patch_threshold": 12},
            ],
            "training": {"seed": 7, "pretrain": {"iterations": 11, "frame_sampling": "variable"}},
            "data": {"tiles": 5, "classes": 3, "cadences": {"modis": 24}},
        }
    )
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(to_dict(cfg)))
    again = load_config(path)
    assert again == cfg
    assert config_hash(again) == config_hash(cfg)


def test_paper_scale_values_expressible():
    cfg = from_dict(
        {
            "model": {"embed_dim": 128, "depths": [2, 2, 18, 2], "heads": [4, 8, 16, 32], "window": [8, 7]},
            "sources": [{"name": "sentinel2", "tile_size": 224}],
            "training": {"pretrain": {"warmup_iterations": 5000, "iterations": 100000, "batch_size": 80}},
        }
    )
    assert cfg.training.pretrain.warmup_iterations == 5000
    assert cfg.training.finetune.learning_rate == 6e-5


def test_both_ablation_flags_off_rejected():
    with pytest.raises(ConfigError, match="at least one"):
        from_dict(
            {
                "sources": [{"name": "sentinel2"}],
                "training": {"pretrain": {"mean_teacher": False, "fraction_supervision": False}},
            }
        )


def test_num_fraction_classes_fixed():
    with pytest.raises(ConfigError, match="fixed at 9"):
        from_dict({"model": {"num_fraction_classes": 5}, "sources": [{"name": "sentinel2"}]})


def test_heads_must_divide_channels():
    with pytest.raises(ConfigError, match="heads"):
        ModelConfig(embed_dim=30, heads=(4, 4, 4, 4))


def test_temporal_patch_rule_yields_2_or_4():
    spec = SourceSpec(name="sentinel2", bands=10, tile_size=64)
    assert {spec.temporal_patch_for(t) for t in range(3, 33)} == {2, 4}


def test_source_helpers():
    cfg = from_dict({"sources": [{"name": "sentinel2", "tile_size": 64}, {"name": "modis", "tile_size": 32}]})
    assert cfg.finest_source.name == "sentinel2"
    assert cfg.source("modis").bands == 7
    with pytest.raises(ConfigError, match="unknown source"):
        cfg.source("nope")
