class TeachRepeatError(Exception):
    """Base class for every error raised by the teach-and-repeat pipeline."""


class InvalidArgumentError(TeachRepeatError, ValueError):
    pass


class ConfigurationError(TeachRepeatError, ValueError):
    pass


class NearSingularityError(TeachRepeatError):
    """Raised when the SE(3) logarithm is requested too close to a rotation of pi."""


class DegenerateNeighborhoodError(TeachRepeatError):
    pass


class SingularWindowError(TeachRepeatError):
    """Raised when the velocity-window Hessian is too ill-conditioned to invert."""


class OutOfRangeError(TeachRepeatError, ValueError):
    pass


class InsufficientDataError(TeachRepeatError):
    pass


class GraphError(TeachRepeatError):
    pass


class LocalizationUnavailableError(TeachRepeatError):
    pass


class ScalingFailureError(TeachRepeatError):
    pass


class StepFailureError(TeachRepeatError):
    pass


class MetricUnavailableError(TeachRepeatError):
    pass
