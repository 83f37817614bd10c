"""Exception types shared across the package."""


class RiskcamError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(RiskcamError, ValueError):
    """Operand shapes are incompatible with the requested operation."""


class ParameterError(RiskcamError, ValueError):
    """A parameter is outside its documented range."""


class GraphError(RiskcamError, RuntimeError):
    """A recorded computation graph was used inconsistently."""


class FormatError(RiskcamError, ValueError):
    """A file does not conform to its expected on-disk format."""


class VersionError(FormatError):
    """A file was written by an unsupported format version."""


class DomainError(RiskcamError, ValueError):
    """A metric was evaluated outside its mathematical domain."""


class CoherencyUndefinedError(DomainError):
    """Pearson correlation is undefined because a map is constant."""
