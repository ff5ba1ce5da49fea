"""Exception hierarchy shared by every module."""


class ATCError(Exception):
    """Base class for all simulator errors."""


class DimensionError(ATCError, ValueError):
    pass


class DegenerateBatchError(ATCError, ValueError):
    pass


class ZeroVectorError(ATCError, ValueError):
    pass


class NumericError(ATCError, FloatingPointError):
    pass


class VocabError(ATCError, ValueError):
    pass


class UsageError(ATCError, RuntimeError):
    pass


class InputError(ATCError, ValueError):
    pass


class GenerationError(ATCError, ValueError):
    pass


class ProtocolError(ATCError, RuntimeError):
    pass


class ConfigError(ATCError, ValueError):
    """Bad configuration; ``key`` names the offending entry when known."""

    def __init__(self, message: str, key: str | None = None):
        super().__init__(message)
        self.key = key
