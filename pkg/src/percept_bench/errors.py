from __future__ import annotations


class PerceptionError(Exception):
    """Base error for the perception toolkit."""
    pass


class GeometryError(PerceptionError, ValueError):
    """Invalid box, window or transform geometry."""
    pass


class BoundsError(PerceptionError, IndexError):
    """Window or feature lies outside the image it is applied to."""
    pass


class ImageFormatError(PerceptionError):
    """Image file could not be decoded."""
    pass


class IndexBuildError(PerceptionError):
    """Descriptor index cannot be built from the given database."""
    pass


class SingularTransformError(PerceptionError):
    """Affine fit is degenerate (collinear points or singular linear part)."""
    pass


class RefinementFailed(PerceptionError):
    """IRLS weights collapsed; the hypothesis cannot be refined."""
    pass


class TrainingError(PerceptionError):
    """Training preconditions are not met (too few samples, single class...)."""
    pass


class EmptySignatureError(PerceptionError):
    """Image has no visual words with non-zero weight."""
    pass


class NormMismatchError(PerceptionError):
    """Signatures normalised in different norms cannot be compared."""
    pass


class CalibrationError(PerceptionError):
    """Stereo calibration is degenerate."""
    pass


class AnnotationError(PerceptionError):
    """Malformed annotation or detection line."""

    def __init__(self, message: str, lineno: int | None = None) -> None:
        self.lineno = lineno
        if lineno is not None:
            message = f"line {lineno}: {message}"
        super().__init__(message)


class ConfigError(PerceptionError):
    """Configuration file or override is invalid."""
    pass


class UnsupportedDetectorError(ConfigError):
    """Keypoint detector is declared but not implemented."""
    pass


class ModelFileError(PerceptionError):
    """Persisted model is missing or has an incompatible format version."""
    pass
