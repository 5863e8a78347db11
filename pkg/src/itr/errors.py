"""Exception hierarchy shared across the package."""


class ITRError(Exception):
    """Base class for errors raised by this package."""


class DataFormatError(ITRError, ValueError):
    """A dataset file could not be parsed."""

    def __init__(self, path, lineno, message):
        self.path = str(path)
        self.lineno = lineno
        super().__init__(f"{self.path}:{lineno}: {message}")


class ConfigError(ITRError, ValueError):
    """Invalid configuration value or override."""


class CheckpointError(ITRError, ValueError):
    """Unreadable or incompatible checkpoint."""
