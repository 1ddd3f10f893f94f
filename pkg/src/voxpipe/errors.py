"""Exception hierarchy shared across the toolkit.

Anything a user can cause with bad inputs derives from ValidationError and is
reported with exit code 2 by the CLI; InternalError marks broken internal
invariants and maps to exit code 3.
"""


class VoxpipeError(Exception):
    """Base class for all toolkit errors."""


class ValidationError(VoxpipeError):
    """Invalid user input: malformed files, bad values, rejected data."""


class StructuralError(ValidationError):
    """Structurally inconsistent data (mismatched shapes, duplicate rows)."""


class ConfigError(ValidationError):
    """Invalid configuration: unknown processor type, unexecutable layer."""


class GuardError(ValidationError):
    """Refusal: a combinatorial size guard was exceeded."""


class InternalError(VoxpipeError):
    """An internal invariant was violated; indicates a bug, not bad input."""
