"""Exception hierarchy; the CLI maps these onto exit codes."""


class AnalogCimError(Exception):
    pass


class ConfigurationError(AnalogCimError, ValueError):
    """Malformed or incomplete configuration, network or input data."""


class DimensionError(ConfigurationError):
    """Tensor shapes do not compose."""


class DomainError(AnalogCimError, ValueError):
    """Argument outside the domain where a model is defined."""


class DegenerateLayerError(AnalogCimError, ValueError):
    """A layer whose weights cannot be mapped (e.g. all zero)."""


class MappingError(AnalogCimError):
    """Layers do not fit on the available crossbar tiles."""

    def __init__(self, message, layers=()):
        super().__init__(message)
        self.layers = list(layers)


class CalibrationError(AnalogCimError, ArithmeticError):
    """A numerical calibration step failed (zero response, rank deficiency, ...)."""


class TrainingError(AnalogCimError, ArithmeticError):
    """Training diverged."""


class FixtureError(AnalogCimError, KeyError):
    """Golden table and computed values do not line up."""
