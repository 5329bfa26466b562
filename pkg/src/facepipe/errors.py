"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: usage problems exit 1 (argparse level),
``DataError`` and its subclasses exit 2, ``NumericalError`` exits 3.
"""

from __future__ import annotations


class FacepipeError(Exception):
    """Base class for all package errors."""


class ShapeError(FacepipeError):
    """A tensor dimension disagrees with what an operation requires."""

    def __init__(self, message: str, *, axis: int | None = None,
                 expected=None, actual=None):
        parts = [message]
        if axis is not None:
            parts.append(f"axis={axis}")
        if expected is not None:
            parts.append(f"expected={expected}")
        if actual is not None:
            parts.append(f"actual={actual}")
        super().__init__("; ".join(str(p) for p in parts))
        self.axis = axis
        self.expected = expected
        self.actual = actual


class DataError(FacepipeError):
    """Malformed or missing input data (files, manifests, protocols)."""


class CheckpointError(DataError):
    """Base class for checkpoint file problems."""


class CheckpointFormatError(CheckpointError):
    """Magic bytes or header structure are wrong."""


class CheckpointVersionError(CheckpointError):
    """The file declares an unsupported format version."""


class CheckpointTruncatedError(CheckpointError):
    """The file ends before all declared payload bytes."""


class CheckpointShapeError(CheckpointError):
    """Stored arrays disagree with the spec the file declares."""


class NumericalError(FacepipeError):
    """A non-finite value or a singular/ill-conditioned estimate."""
