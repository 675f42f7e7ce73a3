"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Raised when a configuration is invalid before any compute happens."""


class DataError(ValueError):
    """Raised when an artifact or dataset is malformed or inconsistent."""


class InvalidActionError(ValueError):
    """Raised when an agent emits an action the environment cannot execute."""
