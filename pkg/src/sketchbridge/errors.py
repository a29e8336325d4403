"""Exception hierarchy shared by every stage of the pipeline."""


class SketchError(Exception):
    """Base class; the CLI maps these to exit code 1."""


class InvalidImage(SketchError, ValueError):
    pass


class CoincidentLandmarks(SketchError, ValueError):
    pass


class OutOfBounds(SketchError, ValueError):
    pass


class BadConfig(SketchError, ValueError):
    pass


class OddDimensions(SketchError, ValueError):
    pass


class UnknownOperator(SketchError, ValueError):
    pass


class WrongDomainTag(SketchError, ValueError):
    pass


class StaleFingerprint(SketchError):
    """A pair manifest was built by a different line-drawing operator."""


class BadShape(SketchError, ValueError):
    pass


class ShapeMismatch(SketchError, ValueError):
    pass


class PsiNotFrozen(SketchError):
    pass


class NegativeWeight(SketchError, ValueError):
    pass


class DegenerateDataset(SketchError, ValueError):
    pass


class EpochOutOfRange(SketchError, ValueError):
    pass


class NonFiniteLoss(SketchError, FloatingPointError):
    def __init__(self, term, values):
        self.term = term
        self.values = dict(values)
        dump = ", ".join(f"{k}={v!r}" for k, v in self.values.items())
        super().__init__(f"non-finite {term} loss ({dump})")


class ChecksumMismatch(SketchError):
    pass


class FingerprintMismatch(SketchError):
    pass


class PatchTooLarge(SketchError, ValueError):
    pass


class DimensionMismatch(SketchError, ValueError):
    pass


class EmptySet(SketchError, ValueError):
    pass


class TooFewIdentities(SketchError, ValueError):
    pass


class UnknownProbeId(SketchError, KeyError):
    pass


class ParseError(SketchError, ValueError):
    pass


class UnknownKey(SketchError, KeyError):
    pass
