"""Exception types shared across the package."""


class FeatuncertError(Exception):
    """Base class for all library errors."""


class DomainError(FeatuncertError):
    """Geometric input outside the operation's domain (e.g. depth <= 0)."""


class BehindCameraError(FeatuncertError):
    """A reprojected point landed behind the target camera.

    Callers treat this as "no guidance available for this depth sample".
    """


class TriangulationDegenerateError(FeatuncertError):
    """Baseline too short or rays too close to parallel to triangulate."""


class EpipolarDegenerateError(FeatuncertError):
    """Relative motion has no usable baseline; the epipolar line collapses."""


class InputError(FeatuncertError):
    """Malformed in-memory input (unsorted timestamps, too few samples...)."""


class ConfigurationError(FeatuncertError):
    """Parameter combination violates a documented constraint."""


class NoGuidanceError(FeatuncertError):
    """Every sampled depth failed to reproject; no guidance hypothesis exists."""


class GridDegenerateError(FeatuncertError):
    """Too few sample-grid points remain inside the image."""


class SamplingError(FeatuncertError):
    """Subpixel intensity lookup outside the image."""


class PatchOutOfBoundsError(FeatuncertError):
    """An image patch (including interpolation margin) exits the image."""


class EnergyFitError(FeatuncertError):
    """Energy-scale bisection found no sign change inside the bracket."""


class MarginalizationFailedError(FeatuncertError):
    """Combined weights underflowed; no usable probability mass."""


class DataFormatError(FeatuncertError):
    """A file could not be parsed; message carries path and line number."""
