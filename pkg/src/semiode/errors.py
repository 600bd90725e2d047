"""Exception hierarchy; ``exit_code`` is what the CLI returns for each."""


class SemiodeError(Exception):
    exit_code = 1


class ConfigError(SemiodeError):
    exit_code = 1


class DataError(SemiodeError):
    exit_code = 2


class NumericError(SemiodeError):
    exit_code = 3


class PreconditionError(NumericError):
    """A fast path's precondition failed; callers fall back to the general route."""


class FitError(NumericError):
    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace or []
