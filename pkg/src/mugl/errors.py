"""Exception hierarchy shared by all mugl modules."""


class MuglError(Exception):
    """Base class for domain errors raised by mugl."""


class DegenerateInput(MuglError, ValueError):
    pass


class InvalidRotation(MuglError, ValueError):
    pass


class TreeMismatch(MuglError, ValueError):
    pass


class ZeroBone(MuglError, ValueError):
    pass


class OutOfRange(MuglError, ValueError):
    pass


class ShapeMismatch(MuglError, ValueError):
    pass


class TooShort(MuglError, ValueError):
    pass


class NonFinite(MuglError, FloatingPointError):
    pass


class UntrainedModel(MuglError):
    pass


class EmptySet(MuglError, ValueError):
    pass


class TooFewSamples(MuglError, ValueError):
    pass


class ClassMismatch(MuglError, ValueError):
    pass


class SkeletonMismatch(MuglError, ValueError):
    pass


class IoFailure(MuglError, OSError):
    pass


class CorruptArchive(MuglError):
    pass


class InvariantViolation(MuglError, ValueError):
    pass


class BadSpec(MuglError, ValueError):
    pass


class UnknownSetup(MuglError, ValueError):
    pass


class EmptyClass(MuglError, ValueError):
    pass


class ConfigError(MuglError, ValueError):
    """Unknown or malformed configuration keys."""
