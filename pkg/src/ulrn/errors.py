"""Exception hierarchy shared by every module."""


class UlrnError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(UlrnError, ValueError):
    """Operand shapes are incompatible with a primitive's contract."""


class NumericError(UlrnError, ArithmeticError):
    """A forward or backward pass produced NaN or Inf."""

    def __init__(self, message, breakdown=None):
        super().__init__(message)
        self.breakdown = breakdown


class ContractError(UlrnError, ValueError):
    """A precondition of an operation was violated."""


class ContextOverflowError(ContractError):
    pass


class VocabularyError(ContractError):
    pass


class DatasetError(UlrnError, ValueError):
    """Malformed or empty dataset input."""


class UndefinedMetricError(UlrnError, ValueError):
    pass


class ConfigError(UlrnError, ValueError):
    """One or more configuration values are invalid.

    ``problems`` lists every offending key so callers can report them at once.
    """

    def __init__(self, problems):
        if isinstance(problems, str):
            problems = [problems]
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


class DivergenceError(NumericError):
    """Training aborted after a non-finite loss; ``last_checkpoint`` is kept."""

    def __init__(self, message, breakdown=None, last_checkpoint=None):
        super().__init__(message, breakdown)
        self.last_checkpoint = last_checkpoint
