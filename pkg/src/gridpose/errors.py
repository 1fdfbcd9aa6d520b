"""Exception hierarchy.

Everything raised on bad user input or bad data derives from GridPoseError;
the CLI maps these to exit code 2. Internal logic errors are left as plain
Python exceptions.
"""


class GridPoseError(Exception):
    """Base class for all gridpose errors."""


class ValidationError(GridPoseError):
    """A domain object violates one of its invariants."""


class DimensionError(GridPoseError):
    """Shapes of grids, masks, or batches do not agree."""


class ParameterError(GridPoseError):
    """An argument is outside its documented range."""


class EmptyMaskError(GridPoseError):
    """A similarity was requested with a mask containing no foreground cells."""


class DegenerateOrientationError(GridPoseError):
    """The up hint is parallel to the viewing direction."""


class BatchContractError(GridPoseError):
    """A training batch violates the mutually-negative sampling contract."""


class InsufficientDataError(GridPoseError):
    """Too few samples to compute the requested statistic."""


class NotFoundError(GridPoseError):
    """A requested object id has no templates in the database."""


class BuildError(GridPoseError):
    """A template database could not be assembled from its records."""


class FormatError(GridPoseError):
    """Base class for on-disk format violations."""


class MagicError(FormatError):
    """File does not start with the expected magic bytes."""


class VersionError(FormatError):
    """File declares an unsupported format version."""


class TruncationError(FormatError):
    """File is shorter than its declared contents."""


class CorruptDataError(FormatError):
    """File payload is structurally valid but contains illegal values."""
