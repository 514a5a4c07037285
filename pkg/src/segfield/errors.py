"""Exception types shared across the package."""


class SegfieldError(Exception):
    """Base class for all package errors."""


class InvalidInputError(SegfieldError, ValueError):
    """An argument violates an operation's precondition."""


class EmptyTargetError(InvalidInputError):
    """A nearest-neighbor target set has no valid points."""


class DegeneratePlaneError(SegfieldError, ValueError):
    """Neighbor points are collinear or coincident; no unique plane exists."""


class UndefinedMetricError(SegfieldError, ValueError):
    """A metric has no ground-truth support to average over."""


class GenerationError(SegfieldError, RuntimeError):
    """The synthetic scene could not be generated."""


class FormatError(SegfieldError, ValueError):
    """A file does not match its declared binary layout.

    Attributes:
        offset: Byte offset at which the problem was detected.
    """

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class TrainingDiverged(SegfieldError, RuntimeError):
    """A non-finite loss appeared during optimization.

    Attributes:
        iteration: Iteration at which the loss became non-finite.
        state: Snapshot of the offending loss terms and field statistics.
    """

    def __init__(self, message: str, iteration: int, state: dict):
        super().__init__(message)
        self.iteration = iteration
        self.state = state
