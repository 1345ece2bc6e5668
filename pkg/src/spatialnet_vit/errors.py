"""Exception types raised across the package."""


class SpatialNetError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(SpatialNetError, ValueError):
    """Operand shapes are incompatible for the requested operation."""


class ConfigError(SpatialNetError, ValueError):
    """A configuration violates its invariants (divisibility, ranges, ...)."""


class ContractError(SpatialNetError, ValueError):
    """An input breaks a documented precondition."""


class DeterminismError(SpatialNetError, RuntimeError):
    """Two evaluations of a supposedly deterministic function disagree."""


class DivergedError(SpatialNetError, RuntimeError):
    """Training produced a non-finite loss or gradient."""

    def __init__(self, step, message="non-finite value"):
        super().__init__(f"training diverged at step {step}: {message}")
        self.step = step


class CorruptCheckpointError(SpatialNetError, ValueError):
    """A checkpoint file is truncated or malformed."""

    def __init__(self, message, offset):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class ConfigMismatchError(SpatialNetError, ValueError):
    """A checkpoint was produced under a different configuration."""


class ImageFormatError(SpatialNetError, ValueError):
    """Unsupported or malformed PPM/PGM data."""


class ImageDimensionError(ImageFormatError):
    """Image dimensions disagree with the expected shape."""


class TruncatedImageError(ImageFormatError):
    """The pixel payload is shorter than the header promises."""

    def __init__(self, message, offset):
        super().__init__(f"{message} (expected payload to end at byte {offset})")
        self.offset = offset


class ManifestError(SpatialNetError, ValueError):
    """A dataset manifest failed validation."""

    def __init__(self, message, offenders=()):
        offenders = list(offenders)
        if offenders:
            message = f"{message}: {', '.join(map(str, offenders))}"
        super().__init__(message)
        self.offenders = offenders
