"""Exception types shared across fpkit."""


class FpkitError(Exception):
    """Base class for all fpkit errors."""


class InvalidInput(FpkitError, ValueError):
    """Input data violates a documented precondition."""


class InvalidParam(FpkitError, ValueError):
    """A hyperparameter lies outside its admissible range."""


class MissingModelAccess(FpkitError):
    """A score needs features or the classifier head, which were not supplied."""


class DegenerateLabels(FpkitError):
    """A ranking metric needs both positives and negatives."""


class DivergedTraining(FpkitError):
    """Training produced a non-finite loss."""

    def __init__(self, epoch: int, message: str = ""):
        self.epoch = epoch
        super().__init__(message or f"non-finite training loss at epoch {epoch}")
