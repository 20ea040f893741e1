"""Exception hierarchy shared across the package."""


class RfgpError(Exception):
    """Base class for all package-specific errors."""


class MissingColumn(RfgpError):
    pass


class NonBinaryLabel(RfgpError):
    pass


class NonFiniteValue(RfgpError):
    pass


class DuplicateLocation(RfgpError):
    pass


class LengthMismatch(RfgpError):
    pass


class DegenerateVariance(RfgpError):
    pass


class InvalidSmoothness(RfgpError):
    pass


class CholeskyFailure(RfgpError):
    pass


class SingularNeighborSystem(RfgpError):
    pass


class SingularSystem(RfgpError):
    pass


class EmptyNode(RfgpError):
    pass


class EmptyChild(RfgpError):
    pass


class TooFewSamples(RfgpError):
    pass


class OutOfDomain(RfgpError):
    pass


class InsufficientInRangePoints(RfgpError):
    pass


class DimensionCap(RfgpError):
    pass


class ConfigError(RfgpError):
    """Invalid or unknown configuration keys / schema violations."""
