"""Exception hierarchy shared by all afpa modules."""


class AfpaError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(AfpaError):
    """Tensor or feature shapes do not satisfy an operation's contract."""


class ContractError(AfpaError):
    """An API was called in a way its contract forbids."""


class NumericError(AfpaError):
    """Non-finite values or other numeric-domain violations."""


class ConfigError(AfpaError):
    """A configuration value is invalid or inconsistent."""


class DataError(AfpaError):
    """Dataset layout or content problems."""


class FormatError(DataError):
    """A file is not in a supported on-disk format."""


class CorruptionError(DataError):
    """A file is truncated or fails its integrity check."""


class VersionError(DataError):
    """A file carries an unsupported format version."""


class MetricUndefinedError(ContractError):
    """A metric was requested for data on which it is undefined."""
