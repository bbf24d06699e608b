"""Configuration schema, validation, and JSON loading.

A run is described by one JSON file with four top-level keys:

- ``model``    — encoder/decoder architecture knobs (:class:`ModelConfig`)
- ``sources``  — one entry per satellite modality (:class:`SourceSpec`)
- ``training`` — pretraining and finetuning settings
- ``data``     — synthetic dataset recipe parameters

Absent optional fields are filled with desk-scale toy defaults chosen so
the whole pipeline runs on CPU in minutes (embed_dim 32, depths 2/2/2/2,
heads 2/2/4/4, window 2x7). Larger, production-scale values are
expressible in the same schema. See ``docs/config_schema.md`` for the
fully annotated example.

Flag precedence in the CLI is flags > file > defaults.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Mapping, Optional

SPATIAL_REDUCTION = 32  # spatial_patch (4) * three merge factors (2*2*2)

DEFAULT_BANDS = {"modis": 7, "landsat": 6, "sentinel2": 10}

SEQ_MIN = 3
SEQ_MAX = 32


class ConfigError(ValueError):
    """Raised when a configuration fails validation; names the offending field."""


def _require(cond: bool, message: str) -> None:
    if not cond:
        raise ConfigError(message)


@dataclass(frozen=True)
class SourceSpec:
    """Declares one satellite modality.

    ``temporal_patch_threshold`` is the sequence-length rule for the
    first-stage temporal patch: clips shorter than the threshold use a
    temporal patch of 2, clips at or above it use 4.
    """

    name: str
    bands: int
    tile_size: int = 64
    temporal_patch_threshold: int = 16
    spatial_patch: int = 4

    def __post_init__(self):
        _require(bool(self.name) and self.name.isidentifier(), f"sources[].name must be an identifier, got {self.name!r}")
        _require(self.bands >= 1, f"sources[{self.name}].bands must be >= 1, got {self.bands}")
        _require(
            self.tile_size % SPATIAL_REDUCTION == 0,
            f"sources[{self.name}].tile_size={self.tile_size} is not divisible by {SPATIAL_REDUCTION} "
            f"(spatial patch 4 times three merge strides of 2)",
        )
        _require(self.spatial_patch >= 1, f"sources[{self.name}].spatial_patch must be >= 1")
        _require(self.temporal_patch_threshold >= SEQ_MIN, f"sources[{self.name}].temporal_patch_threshold must be >= {SEQ_MIN}")

    def temporal_patch_for(self, T: int) -> int:
        """First-stage temporal patch for a clip of length ``T`` (2 or 4)."""
        from .backbone import temporal_patch_size

        return temporal_patch_size(T, threshold=self.temporal_patch_threshold)


@dataclass(frozen=True)
class ModelConfig:
    """Architecture knobs shared by encoder, pretraining head, and decoder.

    Per-stage channel widths are derived, not stored: stage i uses
    ``embed_dim * 2**(i-1)`` so each merge doubles the channel count.
    """

    embed_dim: int = 32
    depths: tuple = (2, 2, 2, 2)
    heads: tuple = (2, 2, 4, 4)
    window: tuple = (2, 7)  # (temporal, spatial)
    spatial_merge_factors: tuple = (2, 2, 2)
    temporal_merge_factors: tuple = (2, 2, 2)
    temporal_downsampling: bool = True
    num_fraction_classes: int = 9
    hidden_dim: Optional[int] = None  # None -> stage-4 channels
    mlp_ratio: float = 4.0
    embed_norm: bool = True
    decoder_channels: tuple = (128, 64, 32)
    decoder_reference_frames: int = 16
    learned_upsample: bool = False
    aux_channels: int = 0
    aux_layer: int = 1

    def __post_init__(self):
        object.__setattr__(self, "depths", tuple(self.depths))
        object.__setattr__(self, "heads", tuple(self.heads))
        object.__setattr__(self, "window", tuple(self.window))
        object.__setattr__(self, "spatial_merge_factors", tuple(self.spatial_merge_factors))
        object.__setattr__(self, "temporal_merge_factors", tuple(self.temporal_merge_factors))
        object.__setattr__(self, "decoder_channels", tuple(self.decoder_channels))
        _require(self.embed_dim >= 1, f"model.embed_dim must be >= 1, got {self.embed_dim}")
        _require(len(self.depths) == 4 and all(d >= 1 for d in self.depths), "model.depths must be 4 positive integers")
        _require(len(self.heads) == 4 and all(h >= 1 for h in self.heads), "model.heads must be 4 positive integers")
        for i, h in enumerate(self.heads):
            _require(
                self.stage_channels[i] % h == 0,
                f"model.heads[{i}]={h} must divide the stage channel width {self.stage_channels[i]}",
            )
        _require(len(self.window) == 2 and all(w >= 1 for w in self.window), "model.window must be (temporal, spatial) positive integers")
        _require(
            len(self.spatial_merge_factors) == 3 and all(f >= 1 for f in self.spatial_merge_factors),
            "model.spatial_merge_factors must be 3 positive integers",
        )
        _require(
            len(self.temporal_merge_factors) == 3 and all(f >= 1 for f in self.temporal_merge_factors),
            "model.temporal_merge_factors must be 3 positive integers",
        )
        _require(
            self.num_fraction_classes == 9,
            f"model.num_fraction_classes is fixed at 9 by the supervision scheme, got {self.num_fraction_classes}",
        )
        _require(self.hidden_dim is None or self.hidden_dim >= 1, "model.hidden_dim must be >= 1 or null")
        _require(self.mlp_ratio > 0, "model.mlp_ratio must be > 0")
        _require(len(self.decoder_channels) == 3 and all(c >= 1 for c in self.decoder_channels), "model.decoder_channels must be 3 positive integers")
        _require(self.decoder_reference_frames >= SEQ_MIN, f"model.decoder_reference_frames must be >= {SEQ_MIN}")
        _require(self.aux_channels >= 0, "model.aux_channels must be >= 0")
        _require(1 <= self.aux_layer <= 3, "model.aux_layer must be in 1..3")

    @property
    def stage_channels(self) -> tuple:
        d = self.embed_dim
        return (d, 2 * d, 4 * d, 8 * d)

    @property
    def fraction_hidden_dim(self) -> int:
        return self.hidden_dim if self.hidden_dim is not None else self.stage_channels[3]


@dataclass(frozen=True)
class PretrainSettings:
    iterations: int = 200
    batch_size: int = 80  # production default; toy presets override (e.g. 4)
    warmup_start: float = 1e-7
    peak_lr: float = 1e-5
    warmup_iterations: int = 5000
    floor_lr: float = 1e-6
    total_iterations: Optional[int] = None  # None -> iterations
    decay: str = "cosine"
    teacher_step: float = 0.001
    mean_teacher: bool = True
    fraction_supervision: bool = True
    consistency_weight: float = 1.0
    frame_sampling: str = "fixed16"
    frames_per_sample: int = 16
    variable_range: tuple = (SEQ_MIN, SEQ_MAX)
    weight_decay: float = 0.05
    betas: tuple = (0.9, 0.999)
    grad_clip: float = 1.0
    checkpoint_every: int = 0  # 0 -> final checkpoint only

    def __post_init__(self):
        object.__setattr__(self, "variable_range", tuple(self.variable_range))
        object.__setattr__(self, "betas", tuple(self.betas))
        _require(self.iterations >= 1, "training.pretrain.iterations must be >= 1")
        _require(self.batch_size >= 1, "training.pretrain.batch_size must be >= 1")
        _require(0 < self.warmup_start < self.peak_lr, "training.pretrain: warmup_start must be < peak_lr")
        _require(0 < self.floor_lr < self.peak_lr, "training.pretrain: floor_lr must be < peak_lr")
        _require(self.warmup_iterations >= 1, "training.pretrain.warmup_iterations must be >= 1")
        _require(self.decay in ("cosine", "linear"), "training.pretrain.decay must be 'cosine' or 'linear'")
        _require(0.0 < self.teacher_step < 1.0, "training.pretrain.teacher_step must be in (0, 1)")
        _require(
            self.mean_teacher or self.fraction_supervision,
            "training.pretrain: at least one of mean_teacher / fraction_supervision must be enabled",
        )
        _require(self.frame_sampling in ("fixed16", "variable"), "training.pretrain.frame_sampling must be 'fixed16' or 'variable'")
        _require(self.frames_per_sample >= 1, "training.pretrain.frames_per_sample must be >= 1")
        lo, hi = self.variable_range
        _require(SEQ_MIN <= lo <= hi <= SEQ_MAX, f"training.pretrain.variable_range must lie within [{SEQ_MIN}, {SEQ_MAX}]")

    @property
    def schedule_total(self) -> int:
        return self.total_iterations if self.total_iterations is not None else self.iterations


@dataclass(frozen=True)
class FinetuneSettings:
    epochs: int = 10
    batch_size: int = 16  # production default; toy presets override (e.g. 4)
    learning_rate: float = 6e-5
    num_classes: int = 2
    keep_fraction: float = 0.25
    min_kept: int = 4096
    ignore_index: int = 255
    weight_decay: float = 0.05
    grad_clip: float = 1.0
    data_fraction: float = 1.0
    freeze: tuple = ()
    frame_sampling: str = "fixed16"
    frames_per_sample: int = 16
    variable_range: tuple = (SEQ_MIN, SEQ_MAX)

    def __post_init__(self):
        object.__setattr__(self, "freeze", tuple(self.freeze))
        object.__setattr__(self, "variable_range", tuple(self.variable_range))
        _require(self.epochs >= 1, "training.finetune.epochs must be >= 1")
        _require(self.batch_size >= 1, "training.finetune.batch_size must be >= 1")
        _require(self.learning_rate > 0, "training.finetune.learning_rate must be > 0")
        _require(self.num_classes >= 2, "training.finetune.num_classes must be >= 2")
        _require(0.0 < self.keep_fraction <= 1.0, "training.finetune.keep_fraction must be in (0, 1]")
        _require(self.min_kept >= 1, "training.finetune.min_kept must be >= 1")
        _require(0.0 < self.data_fraction <= 1.0, "training.finetune.data_fraction must be in (0, 1]")
        _require(
            self.frame_sampling in ("fixed16", "variable", "single_frame"),
            "training.finetune.frame_sampling must be 'fixed16', 'variable', or 'single_frame'",
        )


@dataclass(frozen=True)
class TrainingConfig:
    seed: int = 0
    pretrain: PretrainSettings = field(default_factory=PretrainSettings)
    finetune: FinetuneSettings = field(default_factory=FinetuneSettings)

    def __post_init__(self):
        _require(self.seed >= 0, "training.seed must be >= 0")


@dataclass(frozen=True)
class DataConfig:
    """Synthetic dataset recipe parameters (see :mod:`phenomap.synthetic`)."""

    root: str = "data"
    tiles: int = 24
    classes: int = 2
    noise: float = 0.05
    cadences: Mapping[str, int] = field(default_factory=dict)  # source -> frames per year
    profile: str = "default"  # 'default' | 'phase'
    val_fraction: float = 0.2
    test_fraction: float = 0.2
    min_len: int = 16
    smoothing: int = 0  # 0 -> latent grid // 8
    label_block: int = 1  # class map constant over block x block squares

    def __post_init__(self):
        object.__setattr__(self, "cadences", dict(self.cadences))
        _require(self.tiles >= 1, "data.tiles must be >= 1")
        _require(2 <= self.classes <= 9, "data.classes must be in 2..9")
        _require(self.noise >= 0, "data.noise must be >= 0")
        _require(self.profile in ("default", "phase"), "data.profile must be 'default' or 'phase'")
        _require(0 <= self.val_fraction < 1 and 0 <= self.test_fraction < 1, "data split fractions must lie in [0, 1)")
        _require(self.val_fraction + self.test_fraction < 1, "data.val_fraction + data.test_fraction must be < 1")
        _require(self.min_len >= 1, "data.min_len must be >= 1")
        _require(self.label_block >= 1, "data.label_block must be >= 1")

    def cadence_for(self, source: str) -> int:
        return int(self.cadences.get(source, 20))


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig
    sources: tuple  # of SourceSpec
    training: TrainingConfig
    data: DataConfig

    def __post_init__(self):
        object.__setattr__(self, "sources", tuple(self.sources))
        _require(len(self.sources) >= 1, "sources must list at least one modality")
        names = [s.name for s in self.sources]
        _require(len(set(names)) == len(names), f"sources names must be unique, got {names}")

    def source(self, name: str) -> SourceSpec:
        for s in self.sources:
            if s.name == name:
                return s
        raise ConfigError(f"unknown source {name!r}; configured sources: {[s.name for s in self.sources]}")

    @property
    def source_names(self) -> tuple:
        return tuple(s.name for s in self.sources)

    @property
    def finest_source(self) -> SourceSpec:
        return max(self.sources, key=lambda s: s.tile_size)


def _build_source(entry: Mapping, index: int) -> SourceSpec:
    if not isinstance(entry, Mapping):
        raise ConfigError(f"sources[{index}] must be an object, got {type(entry).__name__}")
    if "name" not in entry:
        raise ConfigError(f"sources[{index}].name is required")
    name = entry["name"]
    bands = entry.get("bands")
    if bands is None:
        if name not in DEFAULT_BANDS:
            raise ConfigError(f"sources[{index}].bands is required for user-defined source {name!r}")
        bands = DEFAULT_BANDS[name]
    known = {"name", "bands", "tile_size", "temporal_patch_threshold", "spatial_patch"}
    unknown = set(entry) - known
    if unknown:
        raise ConfigError(f"sources[{index}] has unknown fields: {sorted(unknown)}")
    kwargs = {k: entry[k] for k in known & set(entry) if k not in ("name", "bands")}
    return SourceSpec(name=name, bands=int(bands), **kwargs)


def _build_section(cls, raw: Mapping, section: str):
    if not isinstance(raw, Mapping):
        raise ConfigError(f"{section} must be an object, got {type(raw).__name__}")
    valid = {f for f in cls.__dataclass_fields__}
    unknown = set(raw) - valid
    if unknown:
        raise ConfigError(f"{section} has unknown fields: {sorted(unknown)}")
    try:
        return cls(**raw)
    except TypeError as exc:
        raise ConfigError(f"{section}: {exc}") from exc


def from_dict(raw: Mapping) -> RunConfig:
    """Build and validate a :class:`RunConfig` from a parsed JSON object."""
    if not isinstance(raw, Mapping):
        raise ConfigError("top-level config must be a JSON object")
    unknown = set(raw) - {"model", "sources", "training", "data"}
    if unknown:
        raise ConfigError(f"unknown top-level keys: {sorted(unknown)}")
    if "sources" not in raw or not raw["sources"]:
        raise ConfigError("sources must list at least one modality")
    sources = tuple(_build_source(e, i) for i, e in enumerate(raw["sources"]))

    model_raw = dict(raw.get("model", {}))
    if "temporal_downsampling_enabled" in model_raw:  # accepted alias
        model_raw["temporal_downsampling"] = model_raw.pop("temporal_downsampling_enabled")
    model = _build_section(ModelConfig, model_raw, "model")

    training_raw = dict(raw.get("training", {}))
    unknown = set(training_raw) - {"seed", "pretrain", "finetune"}
    if unknown:
        raise ConfigError(f"training has unknown fields: {sorted(unknown)}")
    pretrain_raw = dict(training_raw.get("pretrain", {}))
    finetune_raw = dict(training_raw.get("finetune", {}))
    training = TrainingConfig(
        seed=int(training_raw.get("seed", 0)),
        pretrain=_build_section(PretrainSettings, pretrain_raw, "training.pretrain"),
        finetune=_build_section(FinetuneSettings, finetune_raw, "training.finetune"),
    )
    data = _build_section(DataConfig, dict(raw.get("data", {})), "data")
    return RunConfig(model=model, sources=sources, training=training, data=data)


def to_dict(cfg: RunConfig) -> dict:
    """Serialize a :class:`RunConfig` to a JSON-ready dict (round-trips through :func:`from_dict`)."""
    d = asdict(cfg)
    d["sources"] = [asdict(s) for s in cfg.sources]
    return d


def load_config(path) -> RunConfig:
    """Load, validate, and default-fill a JSON config file."""
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    try:
        raw = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {p} is not valid JSON: {exc}") from exc
    return from_dict(raw)


def save_config(cfg: RunConfig, path) -> None:
    Path(path).write_text(json.dumps(to_dict(cfg), indent=2, sort_keys=True) + "\n")


def config_hash(cfg: RunConfig) -> str:
    """Stable short hash of the fully resolved configuration."""
    canon = json.dumps(to_dict(cfg), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()[:12]


def with_overrides(cfg: RunConfig, **kwargs) -> RunConfig:
    """Return a copy of ``cfg`` with top-level sections replaced."""
    return replace(cfg, **kwargs)
