"""
Exception hierarchy for the detection engine.

Every error raised on purpose by the engine derives from EngineError so the
command-line entry point can map it to an exit code in one place.
"""

from typing import Optional


class EngineError(Exception):
    """Base class for all engine errors."""
    pass


class ConfigError(EngineError):
    """Invalid settings or network configuration."""
    pass


class DimensionError(EngineError, ValueError):
    """Tensor shape does not match what an operation expects."""
    pass


class DatasetError(EngineError):
    """Dataset content cannot satisfy the requested operation."""
    pass


class QuantizationError(EngineError):
    """Clustering request cannot be satisfied."""
    pass


class UnknownLayerError(EngineError, KeyError):
    """Requested layer name does not exist in the network."""

    def __str__(self) -> str:
        # KeyError quotes its argument; keep the message readable
        return str(self.args[0]) if self.args else ""


class DataFormatError(EngineError):
    """Base class for malformed input files."""
    pass


class RasterError(DataFormatError):
    """Problem reading a PPM/PGM raster."""
    pass


class RasterMagicError(RasterError):
    """File does not start with P5 or P6."""
    pass


class RasterDepthError(RasterError):
    """Unsupported maxval (only 8-bit rasters are read)."""
    pass


class RasterTruncatedError(RasterError):
    """Pixel payload shorter than the header promises."""
    pass


class ModelFormatError(DataFormatError):
    """Problem reading a model file."""
    pass


class ModelMagicError(ModelFormatError):
    """Wrong magic bytes."""
    pass


class ModelVersionError(ModelFormatError):
    """Unsupported format version."""
    pass


class ModelTruncatedError(ModelFormatError):
    """File ended before all declared content was read."""
    pass


class CodebookCorruptionError(ModelFormatError):
    """Cluster index outside its codebook."""
    pass


class PatchArchiveError(DataFormatError):
    """Problem reading a patch archive."""
    pass


class AnnotationError(DataFormatError):
    """
    Problem in an annotation file.

    Attributes:
        line: 1-based line number of the offending record (None if not line-specific)
    """

    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class AnnotationSyntaxError(AnnotationError):
    """Record is not valid JSON or misses required fields."""
    pass


class AnnotationImageMissingError(AnnotationError):
    """Referenced image file does not exist."""
    pass


class AnnotationBoundsError(AnnotationError):
    """Box extends outside its image."""
    pass
