"""Deterministic synthetic multi-source temporal scenes.

Stands in for real satellite corpora in every test. Each tile gets a
class map drawn from a thresholded smoothed random field; every pixel's
band/time value follows its class's seasonal profile (a sinusoid with
per-class amplitude, phase, and offset per band) plus Gaussian noise.
Coarser sources are block-averaged views of the same fine-grid signal,
so multi-source fusion has a known answer. Per-class phase is the
minimal signal where temporal modeling is necessary: with phase-only
profiles, spatial-only models provably cannot separate the classes.

Per-tile RNG streams are keyed by (seed, tile index), so an identical
recipe yields byte-identical scenes regardless of worker count or
generation order.

Dataset directory layout::

    scenes/<geo_id>/<source>.bin    flat little-endian float32, C-order
    scenes/<geo_id>/<source>.json   {"shape": [C,T,H,W], "dtype", "order", "byteorder"}
    labels/<geo_id>.bin             flat uint8 label map
    labels/<geo_id>.json            {"shape": [H,W], ...}
    manifest.jsonl                  one pretraining entry per (tile, source)
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Mapping, Optional, Sequence

import numpy as np

from .config import ConfigError, RunConfig, SourceSpec
from .fractions import ClassMapping, SequenceManifest, build_manifest, compute_fractions
from .structures import FRACTION_BINS, FractionVector, SceneSample


@dataclass(frozen=True)
class SourceProfile:
    """Per-class sinusoid parameters for one source: value(c, b, t) =
    offset[c, b] + amplitude[c, b] * sin(2*pi*t/cadence + phase[c])."""

    amplitude: np.ndarray  # [classes, bands]
    offset: np.ndarray  # [classes, bands]
    phase: np.ndarray  # [classes]

    def __post_init__(self):
        amp = np.asarray(self.amplitude, dtype=np.float64)
        off = np.asarray(self.offset, dtype=np.float64)
        ph = np.asarray(self.phase, dtype=np.float64)
        if amp.shape != off.shape or amp.ndim != 2 or ph.shape != (amp.shape[0],):
            raise ValueError("profile arrays must be amplitude/offset [classes, bands] and phase [classes]")
        object.__setattr__(self, "amplitude", amp)
        object.__setattr__(self, "offset", off)
        object.__setattr__(self, "phase", ph)


def default_profiles(sources: Sequence[SourceSpec], classes: int) -> Dict[str, SourceProfile]:
    """Well-separated profiles: classes differ in phase, offset, and amplitude."""
    out = {}
    for spec in sources:
        c = np.arange(classes, dtype=np.float64)[:, None]
        b = np.arange(spec.bands, dtype=np.float64)[None, :]
        out[spec.name] = SourceProfile(
            amplitude=0.6 + 0.1 * c + 0.02 * b,
            offset=0.4 + 0.35 * c + 0.03 * b,
            phase=2.0 * np.pi * np.arange(classes) / classes,
        )
    return out


def phase_profiles(
    sources: Sequence[SourceSpec],
    classes: int = 2,
    amplitude: float = 1.0,
    offset: float = 1.0,
    offset_split: float = 0.0,
) -> Dict[str, SourceProfile]:
    """Profiles where classes differ (almost) only in phase.

    With ``offset_split=0`` the classes share identical time-means and
    amplitudes — only temporal order tells them apart.
    """
    out = {}
    for spec in sources:
        amp = np.full((classes, spec.bands), amplitude)
        off = np.full((classes, spec.bands), offset)
        off += offset_split * np.arange(classes, dtype=np.float64)[:, None]
        out[spec.name] = SourceProfile(amplitude=amp, offset=off, phase=2.0 * np.pi * np.arange(classes) / classes)
    return out


@dataclass(frozen=True)
class SceneRecipe:
    """Everything needed to regenerate a scene byte-identically."""

    seed: int
    sources: tuple  # of SourceSpec
    cadences: Mapping[str, int]  # source -> frames per annual sequence
    classes: int = 2
    noise: float = 0.05
    profiles: Optional[Mapping[str, SourceProfile]] = None
    smoothing: int = 0  # box-blur radius for the class field; 0 -> latent grid // 8
    label_block: int = 1  # class map constant over block x block pixel squares

    def __post_init__(self):
        object.__setattr__(self, "sources", tuple(self.sources))
        object.__setattr__(self, "cadences", dict(self.cadences))
        if not self.sources:
            raise ConfigError("scene recipe needs at least one source")
        if not 2 <= self.classes <= FRACTION_BINS:
            raise ConfigError(f"scene recipe classes must be in 2..{FRACTION_BINS}, got {self.classes}")
        if self.noise < 0:
            raise ConfigError("scene recipe noise must be >= 0")
        fine = self.fine_tile
        if self.label_block < 1 or fine % self.label_block:
            raise ConfigError(f"label_block {self.label_block} must divide the finest grid {fine}")
        for s in self.sources:
            if fine % s.tile_size:
                raise ConfigError(f"source {s.name}: tile_size {s.tile_size} must divide the finest grid {fine}")
            if self.cadences.get(s.name, 0) < 1:
                raise ConfigError(f"cadence for source {s.name} must be >= 1")
        profiles = self.profiles if self.profiles is not None else default_profiles(self.sources, self.classes)
        for s in self.sources:
            prof = profiles.get(s.name)
            if prof is None or prof.amplitude.shape != (self.classes, s.bands):
                raise ConfigError(f"profile for source {s.name} must cover [classes={self.classes}, bands={s.bands}]")
        object.__setattr__(self, "profiles", dict(profiles))

    @property
    def fine_tile(self) -> int:
        return max(s.tile_size for s in self.sources)

    @property
    def fine_source(self) -> SourceSpec:
        return max(self.sources, key=lambda s: s.tile_size)

    @classmethod
    def from_config(cls, cfg: RunConfig) -> "SceneRecipe":
        data = cfg.data
        profiles = None
        if data.profile == "phase":
            profiles = phase_profiles(cfg.sources, data.classes)
        return cls(
            seed=cfg.training.seed,
            sources=cfg.sources,
            cadences={s.name: data.cadence_for(s.name) for s in cfg.sources},
            classes=data.classes,
            noise=data.noise,
            profiles=profiles,
            smoothing=data.smoothing,
            label_block=data.label_block,
        )


def _box_blur(field: np.ndarray, radius: int) -> np.ndarray:
    """Two separable box-blur passes with wrap-around boundaries."""
    if radius < 1:
        return field
    k = 2 * radius + 1
    for _ in range(2):
        for axis in (0, 1):
            acc = np.zeros_like(field)
            for off in range(-radius, radius + 1):
                acc += np.roll(field, off, axis=axis)
            field = acc / k
    return field


def _class_field(rng: np.random.Generator, tile: int, classes: int, radius: int) -> np.ndarray:
    field = rng.normal(size=(tile, tile))
    field = _box_blur(field, radius)
    edges = np.quantile(field, np.linspace(0, 1, classes + 1)[1:-1])
    return np.digitize(field, edges).astype(np.uint8)


def _block_mean(x: np.ndarray, factor: int) -> np.ndarray:
    """Mean over factor x factor blocks of the trailing two axes."""
    if factor == 1:
        return x
    *lead, H, W = x.shape
    x = x.reshape(*lead, H // factor, factor, W // factor, factor)
    return x.mean(axis=(-3, -1))


def gen_scene(recipe: SceneRecipe, index: int) -> SceneSample:
    """Generate one deterministic scene; identical (recipe, index) pairs
    produce byte-identical output."""
    if index < 0:
        raise ConfigError(f"tile index must be >= 0, got {index}")
    geo_id = f"g{index:05d}"
    rng = np.random.default_rng(np.random.SeedSequence([recipe.seed, index]))
    fine = recipe.fine_tile
    latent = fine // recipe.label_block
    radius = recipe.smoothing or max(1, latent // 8)
    labels = _class_field(rng, latent, recipe.classes, radius)
    if recipe.label_block > 1:
        labels = np.kron(labels, np.ones((recipe.label_block, recipe.label_block), dtype=np.uint8))

    images = {}
    for spec in recipe.sources:
        prof = recipe.profiles[spec.name]
        cadence = recipe.cadences[spec.name]
        t = np.arange(cadence, dtype=np.float64)
        # value[c, b, t] per class, then broadcast through the label map
        wave = np.sin(2.0 * np.pi * t[None, None, :] / cadence + prof.phase[:, None, None])
        table = prof.offset[:, :, None] + prof.amplitude[:, :, None] * wave  # [classes, bands, T]
        signal = table[labels.ravel()].reshape(fine, fine, spec.bands, cadence)
        signal = signal.transpose(2, 3, 0, 1)  # [C, T, H, W]
        factor = fine // spec.tile_size
        signal = _block_mean(signal, factor)
        if recipe.noise > 0:
            signal = signal + rng.normal(0.0, recipe.noise, size=signal.shape)
        images[spec.name] = np.ascontiguousarray(signal, dtype=np.float32)

    fraction = compute_fractions(labels, ClassMapping.identity(recipe.classes))
    return SceneSample(images=images, label_map=labels, fraction=fraction, geo_id=geo_id)


def write_array(path: Path, arr: np.ndarray, order: str) -> None:
    arr = np.ascontiguousarray(arr)
    if arr.dtype == np.float32:
        arr = arr.astype("<f4", copy=False)
    path.with_suffix(".bin").write_bytes(arr.tobytes())
    header = {
        "shape": list(arr.shape),
        "dtype": str(arr.dtype),
        "order": order,
        "byteorder": "little",
    }
    path.with_suffix(".json").write_text(json.dumps(header) + "\n")


def read_array(path: Path) -> np.ndarray:
    header = json.loads(path.with_suffix(".json").read_text())
    raw = np.frombuffer(path.with_suffix(".bin").read_bytes(), dtype=np.dtype(header["dtype"]))
    return raw.reshape(header["shape"])


def _write_scene(root: Path, sample: SceneSample) -> None:
    scene_dir = root / "scenes" / sample.geo_id
    scene_dir.mkdir(parents=True, exist_ok=True)
    for name, clip in sample.images.items():
        write_array(scene_dir / name, clip, order="CTHW")
    labels_dir = root / "labels"
    labels_dir.mkdir(parents=True, exist_ok=True)
    write_array(labels_dir / sample.geo_id, sample.label_map.astype(np.uint8), order="HW")


def split_for(index: int, tiles: int, val_fraction: float, test_fraction: float) -> str:
    n_test = int(round(tiles * test_fraction))
    n_val = int(round(tiles * val_fraction))
    n_train = tiles - n_val - n_test
    if index < n_train:
        return "train"
    if index < n_train + n_val:
        return "val"
    return "test"


def write_dataset(
    recipe: SceneRecipe,
    tiles: int,
    out_dir,
    *,
    val_fraction: float = 0.2,
    test_fraction: float = 0.2,
    min_len: int = 16,
    frames_per_draw: int = 16,
    workers: int = 1,
) -> Path:
    """Generate ``tiles`` scenes plus the pretraining manifest.

    Embarrassingly parallel per tile; ``workers`` only changes wall
    time, never the bytes written.
    """
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)

    def _one(i: int) -> SceneSample:
        sample = gen_scene(recipe, i)
        _write_scene(root, sample)
        return sample

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            samples = list(pool.map(_one, range(tiles)))
    else:
        samples = [_one(i) for i in range(tiles)]

    mapping = ClassMapping.identity(recipe.classes)
    tile_list = [(s.geo_id, s.label_map) for s in samples]
    sequences = {
        s.geo_id: {
            spec.name: [f"scenes/{s.geo_id}/{spec.name}.bin#{t}" for t in range(recipe.cadences[spec.name])]
            for spec in recipe.sources
        }
        for s in samples
    }
    splits = {s.geo_id: split_for(i, tiles, val_fraction, test_fraction) for i, s in enumerate(samples)}
    manifest = build_manifest(tile_list, sequences, min_len, mapping, splits=splits, frames_per_draw=frames_per_draw)
    manifest_path = root / "manifest.jsonl"
    manifest.save(manifest_path)
    return manifest_path


class SceneDataset:
    """Reader over a generated dataset directory."""

    def __init__(self, root):
        self.root = Path(root)
        manifest_path = self.root / "manifest.jsonl"
        if not manifest_path.exists():
            raise FileNotFoundError(f"no manifest.jsonl under {self.root}")
        self.manifest = SequenceManifest.load(manifest_path)
        self._by_geo: Dict[str, Dict[str, object]] = {}
        for e in self.manifest:
            self._by_geo.setdefault(e.geo_id, {})[e.source] = e

    def geo_ids(self, split: Optional[str] = None) -> list:
        ids = []
        for e in self.manifest:
            if (split is None or e.split == split) and e.geo_id not in ids:
                ids.append(e.geo_id)
        return ids

    @property
    def sources(self) -> tuple:
        return self.manifest.sources

    def load_clip(self, geo_id: str, source: str) -> np.ndarray:
        return read_array(self.root / "scenes" / geo_id / source).astype(np.float32)

    def load_label(self, geo_id: str) -> np.ndarray:
        return read_array(self.root / "labels" / geo_id)

    def fraction(self, geo_id: str, source: str) -> FractionVector:
        return self._by_geo[geo_id][source].fraction

    def sequence_length(self, geo_id: str, source: str) -> int:
        return len(self._by_geo[geo_id][source].frame_paths)
