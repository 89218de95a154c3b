"""Exception hierarchy shared across the package.

Every error raised by library code derives from :class:`DiregError` so that
callers (in particular the CLI) can map failures onto stable exit codes:
data/format problems vs. numerical/solver problems.
"""

from __future__ import annotations


class DiregError(Exception):
    """Base class for all package-specific errors."""


# --- data / format errors -------------------------------------------------

class DataError(DiregError):
    """Base class for input, file and manifest problems."""


class IoError(DataError):
    """A file could not be read or written."""


class FormatError(DataError):
    """A file exists but its contents violate the expected layout."""


class EmptyDataset(DataError):
    """A manifest or split contains no usable pairs."""


class SplitOverlap(DataError):
    """The same pair id appears in more than one split."""


class MissingGroundTruth(DataError):
    """An evaluation entry point needs a ground-truth transform that is absent."""


class GenerationFailed(DataError):
    """The synthetic generator exhausted its retry budget."""


# --- numerical / solver errors --------------------------------------------

class NumericalError(DiregError):
    """Base class for geometric and solver failures."""


class DimensionMismatch(NumericalError):
    """Operands live in different spatial dimensions."""


class ShapeMismatch(NumericalError):
    """Array operands have incompatible shapes."""


class EmptyInput(NumericalError):
    """An operation received an empty point set."""


class EmptyCorrespondences(NumericalError):
    """An operation received an empty correspondence set."""


class DegenerateInput(NumericalError):
    """The input does not constrain a unique rigid transform."""


class TooFewCorrespondences(NumericalError):
    """Fewer correspondences than the minimal sample size."""


class NoValidHypothesis(NumericalError):
    """Every RANSAC sample drawn was degenerate."""


class NoOverlap(NumericalError):
    """ICP found no point pairs within the rejection threshold."""


class StepOutOfRange(NumericalError):
    """A schedule was queried outside [0, total_steps]."""


class Unsupported2D(NumericalError):
    """The requested feature backend is only defined for 3D input."""


class SkippedPair(DiregError):
    """Control-flow signal: a training pair produced no usable pseudo-label."""
