"""Shared exception types, mapped to CLI exit codes in cli.py."""


class ConfigurationError(Exception):
    """Invalid model/run configuration (shape mismatches, bad options)."""


class DataError(Exception):
    """Malformed or inconsistent data file content."""

    def __init__(self, message, path=None, line=None):
        loc = ""
        if path is not None:
            loc += f"{path}"
        if line is not None:
            loc += f":{line}"
        super().__init__(f"{loc}: {message}" if loc else message)
        self.path = path
        self.line = line


class CapacityError(Exception):
    """Requested exact computation exceeds the enumeration bound."""


class DivergenceError(Exception):
    """Training produced a non-finite loss."""
