"""Error hierarchy shared by services and commands."""
from typing import Optional, Sequence


class ToolkitError(Exception):
    """Base class for every error raised on purpose by the toolkit."""


class ShapeMismatchError(ToolkitError, ValueError):
    def __init__(self, what: str, expected: Sequence, actual: Sequence):
        self.what = what
        self.expected = tuple(expected)
        self.actual = tuple(actual)
        super().__init__(f"{what}: expected shape {self.expected}, got {self.actual}")


class NonScalarOutputError(ToolkitError, ValueError):
    pass


class DomainError(ToolkitError, ValueError):
    """An argument lies outside the domain where the operation is defined."""


class NonFiniteError(ToolkitError, FloatingPointError):
    def __init__(self, message: str, step: Optional[int] = None, phase: Optional[str] = None):
        self.step = step
        self.phase = phase
        where = []
        if phase is not None:
            where.append(f"phase={phase}")
        if step is not None:
            where.append(f"step={step}")
        suffix = f" ({', '.join(where)})" if where else ""
        super().__init__(f"{message}{suffix}")


class ConfigError(ToolkitError, ValueError):
    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"{field}: {message}")


class CheckpointError(ToolkitError):
    def __init__(self, message: str, parameter: Optional[str] = None):
        self.parameter = parameter
        prefix = f"{parameter}: " if parameter else ""
        super().__init__(f"{prefix}{message}")
