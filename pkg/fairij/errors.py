"""Exception hierarchy shared by every fairij module.

Two families exist. Input errors (bad files, schemas, configs, requests that
exceed a capacity) map to exit code 1; numerical failures (diverged training,
recurrence breakdown, singular systems) map to exit code 2.
"""


class FairIJError(Exception):
    """Base class for all errors raised by fairij."""

    exit_code = 1


class InputError(FairIJError, ValueError):
    """Invalid input data or arguments."""


class SchemaError(InputError):
    """A data schema references columns the file does not provide."""


class ConfigError(InputError):
    """A configuration file or override could not be resolved."""


class EvaluationError(InputError):
    """A metric was requested on data missing a required group or cell."""


class CapacityError(InputError):
    """A request exceeds a configured size cap."""


class NumericalError(FairIJError, ArithmeticError):
    """A numerical procedure failed."""

    exit_code = 2


class TrainingDivergedError(NumericalError):
    """A non-finite loss was produced during training."""


class NumericalBreakdownError(NumericalError):
    """A recurrence denominator collapsed to zero."""


class DivergenceError(NumericalError):
    """An iterative solver's iterate grew without bound."""


class SolveError(NumericalError):
    """A linear system could not be solved."""


class ConvergenceError(NumericalError):
    """An optimizer stopped short of its gradient tolerance."""


def exit_code_for(exc: BaseException) -> int:
    """Map an exception to the CLI exit code."""
    if isinstance(exc, FairIJError):
        return exc.exit_code
    return 1
