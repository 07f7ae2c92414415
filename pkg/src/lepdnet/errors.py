"""Exception types shared across the package."""


class LepdError(Exception):
    """Base class for package errors."""


class ConfigError(LepdError, ValueError):
    """Invalid configuration, argument or shape combination."""


class DomainError(LepdError, ValueError):
    """A value lies outside its declared domain (range or vocabulary)."""


class DataError(LepdError):
    """A dataset on disk is missing files or violates the metadata schema."""


class CheckpointError(LepdError):
    """A checkpoint is unreadable or does not match the requested config."""
