"""Exception hierarchy shared by all stages."""


class ScreamlocError(Exception):
    pass


class UnsupportedFormat(ScreamlocError):
    pass


class CorruptHeader(ScreamlocError):
    pass


class ClipTooShort(ScreamlocError):
    pass


class EmptyClip(ScreamlocError):
    pass


class LengthMismatch(ScreamlocError):
    pass


class RateMismatch(ScreamlocError):
    pass


class DimensionMismatch(ScreamlocError):
    pass


class SingleClassData(ScreamlocError):
    pass


class DegenerateCorrelation(ScreamlocError):
    pass


class IdMismatch(ScreamlocError):
    pass


class UnknownMicId(ScreamlocError):
    pass


class GeometryError(ScreamlocError):
    pass


class GridTooCoarse(ScreamlocError):
    pass


class NonFiniteLoss(ScreamlocError):
    pass


class NyquistViolation(ScreamlocError):
    pass


class DurationTooShort(ScreamlocError):
    pass
