"""Exception hierarchy shared by all modules."""


class MisalignError(Exception):
    """Base class for every error raised by this package."""


class ConfigError(MisalignError, ValueError):
    pass


class NonPositiveDepth(MisalignError, ValueError):
    """A point lies on or behind the camera plane (z <= 0)."""


class DegenerateScene(MisalignError):
    """Too few correspondences survived to attempt an estimate."""


class EmptyInput(MisalignError, ValueError):
    pass


class RankDeficient(MisalignError):
    """The normal matrix of the small-angle system is (near) singular."""

    def __init__(self, message, condition_number=float("inf")):
        super().__init__(message)
        self.condition_number = condition_number


class TooFewCorrespondences(MisalignError):
    pass


class NothingToFuse(MisalignError):
    """Raised by fusion when every estimate was filtered out."""


class DomainError(MisalignError, ValueError):
    pass


class SubgradientAmbiguity(MisalignError):
    """An L1 term was evaluated at an exactly-zero residual."""


class NumericalFailure(MisalignError):
    """Repeated estimation failures beyond the retry budget."""
