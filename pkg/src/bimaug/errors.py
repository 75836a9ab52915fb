"""Exception types shared across the package."""


class BimaugError(Exception):
    """Base class for all package errors."""


class NonPositiveDepth(BimaugError, ValueError):
    pass


class DimensionMismatch(BimaugError, ValueError):
    pass


class EmptyMask(BimaugError, ValueError):
    pass


class DegenerateDepth(BimaugError, ValueError):
    pass


class MissingDepth(BimaugError, ValueError):
    pass


class InsufficientLength(BimaugError, ValueError):
    pass


class LabelLengthMismatch(BimaugError, ValueError):
    pass


class FormatVersionMismatch(BimaugError):
    pass


class MissingManifest(BimaugError, FileNotFoundError):
    pass


class SchemaMismatch(BimaugError):
    pass


class CorruptFrame(BimaugError):
    def __init__(self, index: int, detail: str = ""):
        self.index = index
        msg = f"corrupt frame at index {index}"
        if detail:
            msg += f": {detail}"
        super().__init__(msg)


class UnreachableWaypoint(BimaugError):
    def __init__(self, index: int, arm: str = ""):
        self.index = index
        self.arm = arm
        super().__init__(f"waypoint {index} unreachable" + (f" for {arm} arm" if arm else ""))


class FrameError(BimaugError):
    """A per-frame failure annotated with the timestep that raised it."""

    def __init__(self, index: int, cause: Exception):
        self.index = index
        self.cause = cause
        super().__init__(f"timestep {index}: {type(cause).__name__}: {cause}")
