"""Exception hierarchy shared by the kernels and the harness."""


class Int4Error(Exception):
    """Base class for every error raised by this package."""


class RangeError(Int4Error, ValueError):
    """An integer value falls outside the representable range."""


class StructureError(Int4Error, ValueError):
    """Shapes, payload lengths or dimensions are inconsistent."""


class InputError(Int4Error, ValueError):
    """Input data is non-finite or otherwise unusable."""


class DegenerateInputError(Int4Error, ValueError):
    """Input would produce a zero step size or scale."""


class ResourceError(Int4Error, ValueError):
    """Requested size exceeds the desk-scale caps."""


class InfeasibleError(Int4Error, ValueError):
    """Sampling probabilities cannot support the requested estimate."""
