"""Exception types raised across the package."""


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class NonFiniteError(FloatingPointError):
    """A NaN or Inf appeared in a tensor or a loss value."""


class DomainError(ValueError):
    """An argument lies outside the mathematical domain of a function."""


class MissingKeyError(KeyError):
    """A block key has no entry in a latency table."""


class LUTFormatError(ValueError):
    """A latency table file is malformed."""


class DatasetFormatError(ValueError):
    """A dataset file is malformed."""


class ConfigError(ValueError):
    """One or more configuration values are invalid.

    ``problems`` lists every violation found, not just the first.
    """

    def __init__(self, problems):
        if isinstance(problems, str):
            problems = [problems]
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))
