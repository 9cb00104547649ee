"""
Exceptions raised across the toolkit.

Everything derives from BorexError so the CLI can turn any of them into a
one-line message and a non-zero exit status.
"""
from __future__ import annotations

from typing import Optional, Sequence


class BorexError(Exception):
    """Base class for every error the toolkit raises on purpose."""


class InvalidSaliency(BorexError):
    pass


class ManifestError(BorexError):
    def __init__(self, message: str, line: int = 0):
        self.line = line
        super().__init__(f"line {line}: {message}" if line else message)


class ShapeError(BorexError, ValueError):
    pass


class OutOfBounds(BorexError, IndexError):
    pass


class ClassifierError(BorexError):
    def __init__(self, message: str, mask_index: Optional[int] = None):
        self.mask_index = mask_index
        if mask_index is not None:
            message = f"{message} (mask {mask_index})"
        super().__init__(message)


class NumericalError(BorexError):
    pass


class EmptyRegion(BorexError):
    pass


class DegenerateSample(BorexError):
    pass


class ProtocolError(ClassifierError):
    def __init__(self, message: str, request_id: Optional[int] = None):
        self.request_id = request_id
        super().__init__(message)


class ClassifierTimeout(ClassifierError, TimeoutError):
    pass


class NonZeroExit(ClassifierError):
    def __init__(self, message: str, returncode: int):
        self.returncode = returncode
        super().__init__(f"{message} (exit status {returncode})")


class ConfigError(BorexError):
    pass


class RunFailed(BorexError):
    def __init__(self, message: str, failures: Sequence[tuple[str, str]] = ()):
        self.failures = list(failures)
        super().__init__(message)
