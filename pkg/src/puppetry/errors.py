"""Exception types shared across the pipeline."""


class PuppetryError(Exception):
    """Base class for all errors raised by this package."""


class InvalidInputError(PuppetryError, ValueError):
    """An argument violates an operation's precondition (shape, range, emptiness)."""


class FormatError(PuppetryError, ValueError):
    """A file does not conform to its documented container format."""


class ConfigError(PuppetryError, ValueError):
    """A project configuration is malformed or references missing paths."""


class TrainingDiverged(PuppetryError, RuntimeError):
    """Training hit a non-finite loss; message carries epoch and batch."""
