"""Exception types shared across the package."""


class ParameterError(ValueError):
    """An argument violates an operation's precondition."""


class ConfigError(ValueError):
    """A model/training configuration is inconsistent or unparseable."""


class CheckpointError(RuntimeError):
    """A checkpoint file is malformed, truncated, or mismatched."""


class StateError(RuntimeError):
    """An operation was called in an invalid state (e.g. double binarization)."""
