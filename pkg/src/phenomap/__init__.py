"""Multi-source temporal encoder and pixel-wise mapper for agricultural
land cover, with land-cover-fraction supervised pretraining."""

__version__ = "0.1.0"

from .config import ModelConfig, RunConfig, SourceSpec, load_config
from .structures import CheckpointBundle, FractionVector, SceneSample, StageFeatures

__all__ = [
    "CheckpointBundle",
    "FractionVector",
    "ModelConfig",
    "RunConfig",
    "SceneSample",
    "SourceSpec",
    "StageFeatures",
    "load_config",
    "__version__",
]
