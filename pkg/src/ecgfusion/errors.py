"""Exception types raised across the pipeline."""


class EcgFusionError(Exception):
    """Base class for all package errors."""


# --- record parsing ---

class MalformedHeader(EcgFusionError):
    pass


class UnsupportedFormat(EcgFusionError):
    pass


class TruncatedData(EcgFusionError):
    pass


class MalformedAnnotation(EcgFusionError):
    pass


class ZeroGain(EcgFusionError):
    pass


# --- signal preparation ---

class InvalidOrder(EcgFusionError):
    pass


class SignalTooShort(EcgFusionError):
    pass


class DegenerateRange(EcgFusionError):
    pass


# --- dataset assembly ---

class TooFewExamples(EcgFusionError):
    pass


class ShiftTooLarge(EcgFusionError):
    pass


# --- tensor core / network ---

class ShapeMismatch(EcgFusionError):
    pass


class NonFiniteValue(EcgFusionError):
    pass


class DegenerateBatch(EcgFusionError):
    pass


# --- training ---

class InvalidDistribution(EcgFusionError):
    pass


class NonFiniteGradient(EcgFusionError):
    pass


class Diverged(EcgFusionError):
    pass


class GeometryMismatch(EcgFusionError):
    pass


# --- evaluation ---

class LabelOutOfRange(EcgFusionError):
    pass


class EmptyMatrix(EcgFusionError):
    pass


class BadCheckpoint(EcgFusionError):
    pass
