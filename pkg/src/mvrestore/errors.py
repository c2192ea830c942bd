"""Exception types shared across the toolkit.

The CLI maps these onto exit codes: ``DatasetError`` -> 2,
``NumericalError`` -> 3. ``DomainError`` signals a caller bug (bad argument
value) and is a ``ValueError``.
"""


class DomainError(ValueError):
    """An argument lies outside the domain of a mathematical operation."""


class DatasetError(Exception):
    """A dataset on disk is missing, malformed or inconsistent."""


class NothingToRestoreError(DatasetError):
    """The target image has no pixel with depth."""


class NumericalError(RuntimeError):
    """An optimization produced a non-finite value."""
