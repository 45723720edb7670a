"""Exception types shared across the package."""


class StylefieldError(Exception):
    """Base class for all package errors."""


class FormatError(StylefieldError):
    """A file or archive does not follow the expected on-disk format."""


class ConsistencyError(StylefieldError):
    """Related inputs disagree with each other (e.g. manifest vs. files)."""


class ValidationError(StylefieldError):
    """An input value violates a documented precondition or invariant."""


class StateError(StylefieldError):
    """An operation was called before its required state was prepared."""
