"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class DomainError(ValueError):
    """A value lies outside the mathematical domain of the operation."""


class ContractError(ValueError):
    """A caller violated a documented precondition."""


class ConfigError(ValueError):
    """A configuration value or key is invalid."""


class ParseError(ValueError):
    """A file could not be decoded; message includes the byte offset."""


class DataMismatchError(ValueError):
    """Data and model disagree on a structural property such as band count."""


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss; message names the component."""
