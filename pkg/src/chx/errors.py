"""Exception hierarchy shared by all chx modules."""


class ChxError(Exception):
    """Base class for every error raised by chx."""


class NumericalError(ChxError, ArithmeticError):
    """Failure of a numerical precondition (division guard, singular matrix)."""


class GridMismatch(ChxError, ValueError):
    pass


class DivisionGuard(NumericalError):
    pass


class ZeroMatrix(NumericalError):
    pass


class BandOutOfRange(ChxError, ValueError):
    pass


class GridInvalid(ChxError, ValueError):
    pass


class GridEmpty(GridInvalid):
    pass


class OutOfHull(ChxError, ValueError):
    """Query outside the elevation or frequency range of a calibration pattern."""


class PoseInvalid(ChxError, ValueError):
    pass


class DimensionMismatch(ChxError, ValueError):
    pass


class PatternMissing(ChxError, ValueError):
    pass


class IndexOutOfRange(ChxError, IndexError):
    pass


class ZeroVector(NumericalError):
    pass


# bg_est is undefined for an all-zero estimate; same failure as ZeroVector
ZeroEstimate = ZeroVector


class SingularGram(NumericalError):
    pass


class ConfigInvalid(ChxError, ValueError):
    pass


class FormatError(ChxError, ValueError):
    """Malformed CHX1/CHP1 container or JSON document."""


class IoFailure(ChxError, OSError):
    """A report or container could not be written."""


def annotate(exc: BaseException, stage: str) -> BaseException:
    """Prefix the message of `exc` with the pipeline stage it came from.

    The exception keeps its type; the stage is also stored as ``exc.stage``.
    """
    if getattr(exc, "stage", None) is None:
        exc.stage = stage
        if exc.args and isinstance(exc.args[0], str):
            exc.args = (f"[{stage}] {exc.args[0]}",) + exc.args[1:]
        else:
            exc.args = (f"[{stage}]",) + exc.args
    return exc
