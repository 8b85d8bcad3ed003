class ConfigError(ValueError):
    """
    Raised when an experiment config is malformed. fieldPath names the offending key, e.g. "solver.lambda"
    """

    def __init__(self, fieldPath: str, message: str):
        super().__init__(fieldPath + ": " + message)
        self.fieldPath = fieldPath


class ConvergenceError(RuntimeError):
    """
    Raised when an iterative solve stops before reaching its tolerance.
    The partial result is kept so callers can still write their artifacts
    """

    def __init__(self, message: str, residual: float, partialResult=None):
        super().__init__(message + " (last residual " + str(residual) + ")")
        self.residual = residual
        self.partialResult = partialResult


class InvariantViolation(AssertionError):
    pass


class MissingDerivativeError(NotImplementedError):
    pass


class MeasureMismatchError(ValueError):
    pass


class InadmissibleSpecError(ValueError):
    pass


class GridError(ValueError):
    pass
