"""Exception types shared across the package."""


class InvalidInputError(ValueError):
    """Argument shapes, ranges, or contents are not acceptable."""


class NumericError(ArithmeticError):
    """A computation received or produced non-finite values."""


class GenerationError(RuntimeError):
    """A taskset generator could not satisfy its constraints."""


class ConfigError(ValueError):
    """An experiment configuration field is missing or invalid."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field
