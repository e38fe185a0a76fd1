"""Exception types shared across the package."""


class DspiError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(DspiError, ValueError):
    """Array dimensions do not match the MDP they are used with."""


class DomainError(DspiError, ValueError):
    """An argument lies outside the domain of the operation."""


class ConfigError(DspiError, ValueError):
    """Invalid solver or experiment configuration."""


class InternalConsistencyError(DspiError, RuntimeError):
    """A computed certificate failed where theory says it cannot."""

    def __init__(self, message, payload=None):
        super().__init__(message)
        self.payload = payload
