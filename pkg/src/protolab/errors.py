"""Exception types raised across protolab."""


class ProtoLabError(Exception):
    """Base class for all protolab errors."""


class DegenerateVector(ProtoLabError, ValueError):
    pass


class DimensionMismatch(ProtoLabError, ValueError):
    pass


class SingletonBatch(ProtoLabError, ValueError):
    pass


class NumericalRange(ProtoLabError, ValueError):
    pass


class NonFinite(ProtoLabError, FloatingPointError):
    pass


class NonFiniteLoss(NonFinite):
    pass


class DuplicateVectors(ProtoLabError, ValueError):
    pass


class InfinitePenalty(ProtoLabError, ValueError):
    pass


class EpsilonNegative(ProtoLabError, ValueError):
    pass


class StaleReport(ProtoLabError, ValueError):
    pass


class ShapeMismatch(ProtoLabError, ValueError):
    pass


class ConfigInvalid(ProtoLabError, ValueError):
    pass


class FormatError(ProtoLabError, ValueError):
    pass
