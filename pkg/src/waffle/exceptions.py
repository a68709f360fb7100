"""Exception types raised across the package."""


class WaffleError(Exception):
    """Base class for all package errors."""


class DataValidationError(WaffleError, ValueError):
    """Input data has the wrong shape, dtype or contains non-finite values."""


class RankDeficiencyError(WaffleError, ValueError):
    """Requested principal components exceed what the samples can support."""

    def __init__(self, message, achievable_rank=None):
        super().__init__(message)
        self.achievable_rank = achievable_rank


class InsufficientSamplesError(WaffleError, ValueError):
    """Not enough clean or attacked samples to build a balanced epoch."""


class EmptyFederationError(WaffleError, RuntimeError):
    """Every client was filtered out before training could start."""


class FingerprintMismatchError(WaffleError, ValueError):
    """A checkpoint was produced under a different spectral/PCA/detector config."""


class SchemaVersionError(WaffleError, ValueError):
    """An output file declares a schema version this package cannot read."""


class ConfigError(WaffleError, ValueError):
    """Experiment configuration failed validation."""


class NotConvergedWarning(UserWarning):
    """An iterative solver hit its iteration cap before reaching tolerance."""
