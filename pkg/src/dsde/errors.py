"""Exception types shared across the package.

Every failure carries a short machine-readable ``code`` (for example
``EMPTY_CALIBRATION``) so callers and the CLI can branch on it without
parsing messages.
"""

from __future__ import annotations


class DsdeError(ValueError):
    """Base error with a stable string code."""

    def __init__(self, code: str, message: str = "") -> None:
        self.code = code
        self.message = message or code
        super().__init__(f"{code}: {self.message}")


class FormatError(DsdeError):
    """Input file could not be parsed. ``line`` is 1-based when known."""

    def __init__(self, code: str, message: str = "", line: int | None = None) -> None:
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(code, message)


class ScorerError(DsdeError):
    pass


class CalibrationError(DsdeError):
    """Missing calibration data or an unknown model."""


class LabelError(DsdeError):
    """Labels are missing or a metric is undefined for the given labels."""
