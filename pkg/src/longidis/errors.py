"""Exception hierarchy shared across the package.

Everything raised on purpose derives from LongidisError so the CLI can map
failures to a nonzero exit status without catching bare Exception.
"""


class LongidisError(Exception):
    """Base class for all package errors."""


class ManifestError(LongidisError):
    """Manifest is malformed, inconsistent, or references bad data."""


class VolumeError(LongidisError):
    """A volume file failed to load or violates its declared properties."""


class ConfigError(LongidisError):
    """Invalid configuration value or unknown configuration key."""


class ModelError(LongidisError):
    """Shape or dimension mismatch in the network or latent codes."""


class LossError(LongidisError):
    """Loss inputs are invalid (shape mismatch, zero vectors, bad labels)."""


class TrainingError(LongidisError):
    """Training cannot proceed (bad dataset, non-finite loss, ...)."""


class CheckpointError(LongidisError):
    """Checkpoint file is missing, truncated, or otherwise unreadable."""


class MetricError(LongidisError):
    """A metric is undefined for the given inputs."""


class ProbeError(LongidisError):
    """Linear probe cannot be fit or evaluated on the given data."""
