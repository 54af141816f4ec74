"""Exception hierarchy shared by all modules."""


class LocodynError(Exception):
    """Base class for all package errors."""


class InvalidParameterError(LocodynError, ValueError):
    """A physical parameter (length, mass, step size, ...) is out of range."""


class ConfigError(LocodynError, ValueError):
    """A configuration file or object is inconsistent."""


class NumericInputError(LocodynError, ValueError):
    """Input arrays contain NaN/inf or have the wrong shape."""


class SingularConfigurationError(LocodynError, ArithmeticError):
    """The generalized inertia matrix could not be Cholesky factorized."""


class DivergenceError(LocodynError, ArithmeticError):
    """A simulated trajectory became non-finite.

    Attributes
    ----------
    step : int
        Index of the Euler step that produced the first non-finite state.
    """

    def __init__(self, step, message=None):
        self.step = step
        super().__init__(message or f"simulation diverged at step {step}")


class DatasetError(LocodynError):
    """Malformed or incompatible dataset file."""


class ModeError(LocodynError, ValueError):
    """Training mode is incompatible with the available subsets."""


class UndefinedMetricError(LocodynError, ArithmeticError):
    """A metric normalizer is zero."""
