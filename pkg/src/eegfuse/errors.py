"""Exception taxonomy shared across the package.

CLI exit codes: ConfigError -> 1, MissingPrerequisiteError -> 2,
NumericalError -> 3. Everything else is a plain bug.
"""

from __future__ import annotations


class EegFuseError(Exception):
    """Base class for all package errors."""


class ShapeError(EegFuseError):
    """Shape mismatch inside a numeric primitive."""

    def __init__(self, op: str, detail: str):
        self.op = op
        self.detail = detail
        super().__init__(f"{op}: {detail}")


class ConfigError(EegFuseError):
    """Invalid run configuration; carries the full violation list."""

    def __init__(self, violations):
        if isinstance(violations, str):
            violations = [violations]
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))


class MissingPrerequisiteError(EegFuseError):
    """A pipeline stage ran before the stage that produces its inputs."""

    def __init__(self, artifact: str, producer: str):
        self.artifact = artifact
        self.producer = producer
        super().__init__(f"missing {artifact}; run {producer}")


class NumericalError(EegFuseError):
    """Non-finite loss/gradient or collapsed representation during training."""

    def __init__(self, message: str, step: int | None = None):
        self.step = step
        if step is not None:
            message = f"{message} (step {step})"
        super().__init__(message)


class FormatError(EegFuseError):
    """Base class for binary file format violations."""


class BadMagicError(FormatError):
    def __init__(self, path: str, expected: bytes, got: bytes):
        super().__init__(f"{path}: bad magic, expected {expected!r}, got {got!r}")


class VersionError(FormatError):
    def __init__(self, path: str, expected: int, got: int):
        super().__init__(f"{path}: unsupported version {got}, expected {expected}")


class TruncatedError(FormatError):
    def __init__(self, path: str, expected: int, actual: int):
        self.expected = expected
        self.actual = actual
        super().__init__(f"{path}: truncated, expected {expected} bytes, got {actual}")


class ChecksumError(FormatError):
    def __init__(self, path: str, expected: int, got: int):
        super().__init__(f"{path}: CRC32 mismatch, header {expected:#010x}, computed {got:#010x}")


class DimensionMismatchError(FormatError):
    def __init__(self, path: str, detail: str):
        super().__init__(f"{path}: dimension mismatch, {detail}")
