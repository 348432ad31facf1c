"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: config errors -> 2, data errors -> 3,
numeric/runtime failures -> 4.
"""

from __future__ import annotations


class CorrregError(Exception):
    """Base class for all package errors."""


class ConfigError(CorrregError, ValueError):
    pass


class CheckpointMismatch(ConfigError):
    pass


class DataError(CorrregError, ValueError):
    pass


class ManifestError(DataError):
    pass


class MissingFile(ManifestError):
    pass


class MalformedRow(ManifestError):
    pass


class DuplicatePairId(ManifestError):
    pass


class NonPositiveSpacing(ManifestError):
    pass


class BoxOutOfRange(DataError):
    pass


class LandmarkError(DataError):
    pass


class OutOfBounds(LandmarkError):
    pass


class DuplicateLandmarkId(LandmarkError):
    pass


class UnmatchedLandmarks(LandmarkError):
    pass


class AlreadyStandardized(DataError):
    pass


class NumericalError(CorrregError, RuntimeError):
    pass


class SingularTransform(NumericalError, ValueError):
    pass
