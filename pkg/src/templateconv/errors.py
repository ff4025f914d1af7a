"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Tensor dimensions are incompatible with the requested operation."""


class GeometryError(ValueError):
    """Convolution geometry produces an empty or invalid output."""


class TransformError(ValueError):
    """Spatial transform parameters are invalid (e.g. singular affine)."""


class CheckpointError(IOError):
    """A serialized tensor, layer, or network file is malformed."""
