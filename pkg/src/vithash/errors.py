"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class ConfigError(ValueError):
    """A configuration value violates its constraints."""


class ContractError(ValueError):
    """A caller broke a documented precondition."""


class NumericError(ArithmeticError):
    """A quantity is numerically undefined (e.g. cosine of a zero vector)."""


class FormatError(ValueError):
    """A binary file does not match its declared layout."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset
