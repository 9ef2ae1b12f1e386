"""Exception hierarchy shared across the toolkit."""


class CalikitError(Exception):
    """Base class for all toolkit errors."""

    exit_code = 1


class ParseError(CalikitError):
    exit_code = 3

    def __init__(self, path, line_no, msg):
        self.path = path
        self.line_no = line_no
        super().__init__(f"{path}:{line_no}: {msg}")


class DomainError(CalikitError, ValueError):
    exit_code = 2


class ShapeError(CalikitError, ValueError):
    exit_code = 2


class NumericError(CalikitError, ArithmeticError):
    exit_code = 4


class TrainingError(NumericError):
    def __init__(self, epoch, msg):
        self.epoch = epoch
        super().__init__(f"epoch {epoch}: {msg}")


class ConvergenceError(NumericError):
    def __init__(self, residual, iterations):
        self.residual = residual
        self.iterations = iterations
        super().__init__(
            f"conjugate gradient did not converge after {iterations} iterations "
            f"(relative residual {residual:.3e})"
        )


class CompatibilityError(CalikitError):
    exit_code = 3
