"""Exception hierarchy shared by the library and the command line."""


class MsmTrialError(Exception):
    """Base class for all package errors."""


class ConfigError(MsmTrialError, ValueError):
    """Invalid user input: malformed files, inconsistent design, bad flags."""


class CohortFormatError(ConfigError):
    """A cohort file does not match the documented CSV schema."""

    def __init__(self, message, line=None, path=None):
        self.line = line
        self.path = path
        where = ""
        if path is not None:
            where += f"{path}"
        if line is not None:
            where += f":{line}"
        super().__init__(f"{where}: {message}" if where else message)


class NumericalError(MsmTrialError, ArithmeticError):
    """A numerical procedure failed or its answer is undefined."""


class SingularCovarianceError(NumericalError):
    """A covariance increment that must be positive definite is not."""


class UnreachablePowerError(NumericalError):
    """No admissible sample size reaches the requested power."""


class ConvergenceError(NumericalError):
    """An iterative procedure (root finding, refinement) did not converge."""


class PowerMonotonicityError(NumericalError):
    """Empirical power estimates are non-monotone beyond Monte Carlo noise."""
