"""Exception types raised across the package."""


class WeeError(Exception):
    """Base class for all package errors."""


class InvalidInputError(WeeError, ValueError):
    pass


class InvalidDistributionError(InvalidInputError):
    pass


class ShapeError(WeeError, ValueError):
    pass


class ConfigError(WeeError, ValueError):
    pass


class DeterminismError(WeeError, RuntimeError):
    pass


class CapacityError(WeeError, ValueError):
    """Sequence longer than the decoder's position table."""


class TrainingFailure(WeeError, RuntimeError):
    """Training diverged or missed its target within budget."""


class FrozenDriftError(WeeError, RuntimeError):
    """A parameter marked frozen changed during training."""
