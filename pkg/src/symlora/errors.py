"""Exception hierarchy shared across the package.

All failures raised by library code derive from SymloraError so callers
(and the CLI) can distinguish them from programming errors.
"""


class SymloraError(Exception):
    """Base class for every error raised by this package."""


class ShapeMismatchError(SymloraError):
    """Operands have incompatible shapes."""


class RankRangeError(SymloraError):
    """Requested adapter rank is outside [1, min(n, m)]."""


class ConfigError(SymloraError):
    """Invalid model, policy, or training configuration."""


class ConvergenceError(SymloraError):
    """An iterative solver exhausted its iteration budget."""


class DivergenceError(SymloraError):
    """Training loss became non-finite."""


class NoAdaptersError(SymloraError):
    """An operation requiring adapters was called on a bare model."""


class MissingArmError(SymloraError):
    """A comparison is missing one of its two result arms."""


class CheckpointError(SymloraError):
    """Base class for checkpoint read/write failures."""


class CorruptCheckpointError(CheckpointError):
    """Checkpoint bytes failed a structural or checksum validation."""


class FingerprintMismatchError(CheckpointError):
    """Checkpoint was created against a different frozen base model."""
