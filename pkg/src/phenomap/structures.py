"""Shared data structures and tensor-layout conventions.

Layout conventions used throughout the package:

- Raw satellite clips are channel-first ``[C, T, H, W]`` arrays
  (spectral band, frame, row, column).
- Encoder stage features are time-major channels-last ``[T, H, W, C]``.
- Converting between the two is a pure axis permutation and round-trips
  bit-exactly (:func:`raw_to_stage_layout` / :func:`stage_to_raw_layout`).

All structures here are immutable after construction and safe to share
read-only across parallel workers.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Mapping, Optional

import numpy as np

FRACTION_BINS = 9

# Bin 0 collects everything not covered by the eight named classes.
FRACTION_CLASS_NAMES = (
    "background",
    "cropland",
    "forest",
    "shrubland",
    "grassland",
    "wetland",
    "water",
    "bare",
    "urban",
)

FRACTION_SUM_TOL = 1e-9


def raw_to_stage_layout(x):
    """Permute a raw ``[C, T, H, W]`` array to stage layout ``[T, H, W, C]``."""
    if x.ndim != 4:
        raise ValueError(f"expected a 4-d array [C, T, H, W], got shape {tuple(x.shape)}")
    if isinstance(x, np.ndarray):
        return np.moveaxis(x, 0, -1)
    return x.permute(1, 2, 3, 0)


def stage_to_raw_layout(x):
    """Permute a stage ``[T, H, W, C]`` array back to raw ``[C, T, H, W]``."""
    if x.ndim != 4:
        raise ValueError(f"expected a 4-d array [T, H, W, C], got shape {tuple(x.shape)}")
    if isinstance(x, np.ndarray):
        return np.moveaxis(x, -1, 0)
    return x.permute(3, 0, 1, 2)


@dataclass(frozen=True, eq=False)
class FractionVector:
    """Land-cover fraction vector: 9 non-negative reals summing to 1.

    Index 0 is the background/other bin; indices 1..8 follow
    :data:`FRACTION_CLASS_NAMES`.
    """

    values: np.ndarray

    def __eq__(self, other) -> bool:
        return isinstance(other, FractionVector) and np.array_equal(self.values, other.values)

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.shape != (FRACTION_BINS,):
            raise ValueError(f"fraction vector must have shape ({FRACTION_BINS},), got {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("fraction vector contains non-finite entries")
        if np.any(v < -FRACTION_SUM_TOL) or np.any(v > 1.0 + FRACTION_SUM_TOL):
            raise ValueError("fraction entries must lie in [0, 1]")
        if abs(float(v.sum()) - 1.0) > FRACTION_SUM_TOL:
            raise ValueError(f"fraction entries must sum to 1, got {float(v.sum()):.12f}")
        v = v.copy()
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    def background_only(self) -> bool:
        """True when the tile carries nothing but the background bin."""
        return bool(self.values[0] >= 1.0 - FRACTION_SUM_TOL)

    def tolist(self) -> list:
        return [float(x) for x in self.values]


@dataclass(frozen=True)
class StageFeatures:
    """One encoder stage's feature map in ``[T, H, W, C]`` layout."""

    data: Any  # numpy array or torch tensor, [T_i, H_i, W_i, C_i]
    stage_index: int

    def __post_init__(self):
        if not 1 <= self.stage_index <= 4:
            raise ValueError(f"stage_index must be in 1..4, got {self.stage_index}")
        if self.data.ndim != 4:
            raise ValueError(f"stage features must be 4-d [T, H, W, C], got shape {tuple(self.data.shape)}")
        if any(int(d) < 1 for d in self.data.shape):
            raise ValueError(f"all stage feature dims must be >= 1, got {tuple(self.data.shape)}")
        if isinstance(self.data, np.ndarray):
            finite = np.all(np.isfinite(self.data))
        else:
            import torch

            finite = bool(torch.isfinite(self.data).all())
        if not finite:
            raise ValueError("stage features contain non-finite values")

    @property
    def shape(self) -> tuple:
        return tuple(int(d) for d in self.data.shape)


@dataclass(frozen=True)
class SceneSample:
    """One tile: per-source clips, a label map, and the fraction target.

    ``images`` maps source name to a float32 ``[C, T, H, W]`` clip; the
    label map is an integer ``[H, W]`` grid at the finest source's
    resolution with values in ``0..K``.
    """

    images: Mapping[str, np.ndarray]
    label_map: np.ndarray
    fraction: FractionVector
    geo_id: str

    def __post_init__(self):
        if not self.images:
            raise ValueError("scene sample must carry at least one source clip")
        for name, clip in self.images.items():
            if clip.ndim != 4:
                raise ValueError(f"source {name!r} clip must be [C, T, H, W], got shape {clip.shape}")
        if self.label_map.ndim != 2:
            raise ValueError(f"label map must be 2-d, got shape {self.label_map.shape}")
        if not np.issubdtype(self.label_map.dtype, np.integer):
            raise ValueError("label map must be an integer array")


@dataclass(frozen=True)
class CheckpointBundle:
    """Named-parameter store with student and optional teacher variants.

    Parameter maps are name -> float32 numpy array. Student and teacher
    maps, when both present, must share key sets and shapes.
    """

    student: Mapping[str, np.ndarray]
    teacher: Optional[Mapping[str, np.ndarray]] = None
    metadata: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if self.teacher is not None:
            s_keys = set(self.student)
            t_keys = set(self.teacher)
            if s_keys != t_keys:
                missing = sorted(s_keys ^ t_keys)
                raise ValueError(f"student/teacher key sets differ: {missing}")
            for k in self.student:
                if tuple(self.student[k].shape) != tuple(self.teacher[k].shape):
                    raise ValueError(
                        f"student/teacher shape mismatch for {k!r}: "
                        f"{tuple(self.student[k].shape)} vs {tuple(self.teacher[k].shape)}"
                    )

    @property
    def roles(self) -> tuple:
        return ("student", "teacher") if self.teacher is not None else ("student",)
