"""Exception types shared across the package."""


class CfSearchError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(CfSearchError):
    """A model or run configuration is malformed or violates a constraint."""


class IngestError(CfSearchError):
    """An input file could not be parsed into interactions."""


class SplitError(CfSearchError):
    """A dataset split request cannot be satisfied."""


class SamplingError(CfSearchError):
    """Negative sampling is impossible for the requested user."""


class HistoryError(CfSearchError):
    """A search history file is missing, corrupted, or incompatible."""


class InternalError(CfSearchError):
    """An internal invariant was violated (a bug, not a user mistake)."""
