"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class ConfigError(ValueError):
    """A configuration value is outside its valid range."""


class ContractError(RuntimeError):
    """A call violated an operation's precondition."""


class NonFiniteError(FloatingPointError):
    """An operation produced NaN or Inf from its inputs."""
