"""Land-cover fraction extraction and pretraining manifests.

Turns label rasters into fixed-size tiles, counts per-class pixel
fractions, and assembles the JSON-lines manifest that drives
pretraining. Every function here is pure; tile processing can run on
parallel workers with output order fixed by row-major offsets.
"""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np

from .structures import FRACTION_BINS, FractionVector

log = logging.getLogger(__name__)

_FRAME_INDEX_RE = re.compile(r"#(\d+)$")


class ClassMapping:
    """Total mapping from raw label codes to the 9 fraction bins.

    Codes absent from the mapping fall into bin 0 (background), so the
    mapping is total over the raw code domain.
    """

    def __init__(self, mapping: Mapping[int, int]):
        self._map = {}
        for code, bin_idx in mapping.items():
            code = int(code)
            bin_idx = int(bin_idx)
            if not 0 <= bin_idx < FRACTION_BINS:
                raise ValueError(f"bin index for code {code} must be in 0..{FRACTION_BINS - 1}, got {bin_idx}")
            self._map[code] = bin_idx

    @classmethod
    def identity(cls, num_classes: int = FRACTION_BINS) -> "ClassMapping":
        """Label value k maps straight to bin k (k < 9)."""
        if not 1 <= num_classes <= FRACTION_BINS:
            raise ValueError(f"num_classes must be in 1..{FRACTION_BINS}")
        return cls({k: k for k in range(num_classes)})

    @classmethod
    def from_json(cls, path) -> "ClassMapping":
        raw = json.loads(Path(path).read_text())
        return cls({int(k): int(v) for k, v in raw.items()})

    def to_json(self, path) -> None:
        Path(path).write_text(json.dumps({str(k): v for k, v in sorted(self._map.items())}, indent=2) + "\n")

    def apply(self, labels: np.ndarray) -> np.ndarray:
        """Map a raw-code array to bin indices (vectorized, unmapped -> 0)."""
        labels = np.asarray(labels)
        out = np.zeros(labels.shape, dtype=np.int64)
        for code, bin_idx in self._map.items():
            if bin_idx != 0:
                out[labels == code] = bin_idx
        return out

    def __len__(self) -> int:
        return len(self._map)


def compute_fractions(label_map: np.ndarray, mapping: ClassMapping) -> FractionVector:
    """Per-bin pixel fraction of a label map: count(bin k) / (H * W)."""
    label_map = np.asarray(label_map)
    if label_map.ndim != 2 or label_map.size == 0:
        raise ValueError(f"label map must be a non-empty 2-d array, got shape {label_map.shape}")
    if not np.issubdtype(label_map.dtype, np.integer):
        raise ValueError(f"label map must hold integers, got dtype {label_map.dtype}")
    bins = mapping.apply(label_map)
    counts = np.bincount(bins.ravel(), minlength=FRACTION_BINS).astype(np.float64)
    return FractionVector(counts / float(label_map.size))


def crop_tiles(label_raster: np.ndarray, tile: int) -> list:
    """Cut a raster into non-overlapping ``tile x tile`` maps, row-major.

    Trailing remainders smaller than ``tile`` are discarded (padding
    would corrupt the fraction statistics). A raster smaller than the
    tile yields an empty list, not an error.
    """
    label_raster = np.asarray(label_raster)
    if label_raster.ndim != 2:
        raise ValueError(f"label raster must be 2-d, got shape {label_raster.shape}")
    if tile < 1:
        raise ValueError(f"tile size must be >= 1, got {tile}")
    H, W = label_raster.shape
    out = []
    for r in range(0, H - tile + 1, tile):
        for c in range(0, W - tile + 1, tile):
            out.append(((r, c), label_raster[r : r + tile, c : c + tile].copy()))
    return out


def _frame_index(ref: str) -> Optional[int]:
    m = _FRAME_INDEX_RE.search(ref)
    return int(m.group(1)) if m else None


@dataclass(frozen=True)
class ManifestEntry:
    geo_id: str
    source: str
    frame_paths: tuple
    fraction: FractionVector
    split: str = "train"
    frames_per_draw: int = 16

    def __post_init__(self):
        object.__setattr__(self, "frame_paths", tuple(self.frame_paths))
        indices = [_frame_index(ref) for ref in self.frame_paths]
        if all(i is not None for i in indices) and indices:
            if any(b <= a for a, b in zip(indices, indices[1:])):
                raise ValueError(f"frame references for {self.geo_id}/{self.source} are not temporally ordered")
        if self.fraction.background_only():
            raise ValueError(f"background-only tile {self.geo_id} must not enter a manifest")

    def to_json(self) -> str:
        return json.dumps(
            {
                "geo_id": self.geo_id,
                "source": self.source,
                "frame_paths": list(self.frame_paths),
                "fraction": self.fraction.tolist(),
                "split": self.split,
                "frames_per_draw": self.frames_per_draw,
            }
        )

    @classmethod
    def from_json(cls, line: str) -> "ManifestEntry":
        raw = json.loads(line)
        return cls(
            geo_id=raw["geo_id"],
            source=raw["source"],
            frame_paths=tuple(raw["frame_paths"]),
            fraction=FractionVector(np.asarray(raw["fraction"], dtype=np.float64)),
            split=raw.get("split", "train"),
            frames_per_draw=int(raw.get("frames_per_draw", 16)),
        )


@dataclass
class SequenceManifest:
    """Ordered list of per-(tile, source) pretraining entries.

    Each entry's sampling plan records that training draws
    ``frames_per_draw`` temporally ordered frames uniformly without
    replacement per iteration; the draw itself happens in the training
    harness with the run seed.
    """

    entries: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def filter(self, split: Optional[str] = None, source: Optional[str] = None) -> list:
        out = self.entries
        if split is not None:
            out = [e for e in out if e.split == split]
        if source is not None:
            out = [e for e in out if e.source == source]
        return out

    @property
    def sources(self) -> tuple:
        seen = []
        for e in self.entries:
            if e.source not in seen:
                seen.append(e.source)
        return tuple(seen)

    def save(self, path) -> None:
        with open(path, "w") as fh:
            for e in self.entries:
                fh.write(e.to_json() + "\n")

    @classmethod
    def load(cls, path) -> "SequenceManifest":
        entries = []
        with open(path) as fh:
            for line in fh:
                line = line.strip()
                if line:
                    entries.append(ManifestEntry.from_json(line))
        return cls(entries)


def build_manifest(
    tiles: Sequence,
    sequences: Mapping[str, Mapping[str, Sequence[str]]],
    min_len: int,
    mapping: ClassMapping,
    splits: Optional[Mapping[str, str]] = None,
    frames_per_draw: int = 16,
) -> SequenceManifest:
    """Assemble a pretraining manifest from tiles and frame sequences.

    ``tiles`` is a sequence of ``(geo_id, label_map)``; ``sequences``
    maps geo_id -> source -> ordered frame references. Background-only
    tiles are dropped here (not at tiling time, so the tiler stays
    reusable); sequences shorter than ``min_len`` are skipped with a
    logged warning.
    """
    splits = splits or {}
    manifest = SequenceManifest()
    for geo_id, label_map in tiles:
        fraction = compute_fractions(label_map, mapping)
        if fraction.background_only():
            log.info("dropping background-only tile %s", geo_id)
            continue
        for source, frames in sequences.get(geo_id, {}).items():
            if len(frames) < min_len:
                log.warning(
                    "skipping %s/%s: sequence length %d below minimum %d", geo_id, source, len(frames), min_len
                )
                continue
            manifest.entries.append(
                ManifestEntry(
                    geo_id=geo_id,
                    source=source,
                    frame_paths=tuple(frames),
                    fraction=fraction,
                    split=splits.get(geo_id, "train"),
                    frames_per_draw=frames_per_draw,
                )
            )
    return manifest
