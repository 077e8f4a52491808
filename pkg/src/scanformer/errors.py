"""Exception hierarchy shared by every scanformer module."""


class ScanFormerError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(ScanFormerError):
    """Inconsistent or unknown configuration."""


class DimensionError(ScanFormerError):
    """Tensor shapes do not line up."""


class ContractError(ScanFormerError):
    """A call violated an operation's precondition (ordering, ranges, states)."""


class InputError(ScanFormerError):
    """User-supplied data is malformed or out of range."""


class NumericalError(ScanFormerError):
    """An operation would have produced NaN or Inf."""


class GenerationError(ScanFormerError):
    """The synthetic generator exhausted its retry budget."""


class TrainingError(ScanFormerError):
    """Optimization diverged (non-finite loss)."""
