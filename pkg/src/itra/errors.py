"""Exception types shared across the package."""


class ItraError(Exception):
    pass


class DimensionError(ItraError, ValueError):
    """Operand shapes are incompatible."""


class ContractError(ItraError, ValueError):
    """A documented precondition was violated."""


class DegenerateInputError(ItraError, ValueError):
    """Input is too small or degenerate for the requested statistic."""


class FormatError(ItraError, ValueError):
    """A data file does not follow its declared format."""


class ConfigError(ItraError, ValueError):
    """A run configuration is invalid or refers to missing inputs."""


class NumericalError(ItraError, RuntimeError):
    """Training produced a non-finite value."""
