"""Exception hierarchy shared by every varigrad module."""


class VarigradError(Exception):
    """Base class for all errors raised by varigrad."""


class ShapeError(VarigradError, ValueError):
    pass


class DomainError(VarigradError, ValueError):
    pass


class ConstraintError(DomainError):
    """A parameter lies outside its feasible set (e.g. log_alpha > 0)."""


class ConfigurationError(VarigradError, ValueError):
    """Incompatible combination of options, or an invalid config field.

    ``field`` names the offending configuration key when there is one.
    """

    def __init__(self, message, field=None):
        super().__init__(message)
        self.field = field


class FormatError(VarigradError, ValueError):
    pass


class ConsistencyError(VarigradError, ValueError):
    pass


class StatisticsError(VarigradError, ValueError):
    pass


class OptimizerError(VarigradError, FloatingPointError):
    def __init__(self, message, path=None):
        super().__init__(message)
        self.path = path
