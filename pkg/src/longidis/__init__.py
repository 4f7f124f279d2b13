"""Longitudinal disentanglement toolkit for volumetric image pairs."""

from .errors import (
    CheckpointError,
    ConfigError,
    LongidisError,
    LossError,
    ManifestError,
    MetricError,
    ModelError,
    ProbeError,
    TrainingError,
    VolumeError,
)

__version__ = "0.1.0"

__all__ = [
    "CheckpointError",
    "ConfigError",
    "LongidisError",
    "LossError",
    "ManifestError",
    "MetricError",
    "ModelError",
    "ProbeError",
    "TrainingError",
    "VolumeError",
    "__version__",
]
