"""Shared error types with location payloads for file formats."""


class ConfigError(ValueError):
    """A configuration value is invalid or inconsistent with the data."""


class FormatError(ValueError):
    """A binary file violates its format; ``offset`` is the byte position."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class ManifestError(ValueError):
    """A manifest line is invalid; ``line`` is the 1-based line number."""

    def __init__(self, message: str, line: int | None = None):
        if line is not None:
            message = f"{message} (manifest line {line})"
        super().__init__(message)
        self.line = line
