"""Exception types shared across the package."""


class InputError(ValueError):
    """Raised when arguments violate an operation's preconditions."""


class NoCorrespondencesError(InputError):
    """Raised when a covisibility mask selects no voxels."""


class SingularFitError(InputError):
    """Raised when an unregularized least-squares problem has no unique solution."""


class UndefinedMetricError(InputError):
    """Raised when a statistic is undefined for the given data (e.g. constant targets)."""


class EmptyRoiError(InputError):
    """Raised when an ROI has no included voxels."""


class DegenerateTestError(InputError):
    """Raised when paired differences have zero variance."""


class StageError(RuntimeError):
    """A pipeline failure tagged with the stage that produced it."""

    def __init__(self, stage, message):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage
