"""Exception hierarchy shared by every pipeline stage.

The CLI maps the three top-level families onto exit codes:
``DataError`` -> 3, ``NumericError`` -> 4, anything else -> 1.
"""


class PepipeError(Exception):
    pass


class DataError(PepipeError):
    """Invalid input data, configuration or on-disk state."""


class NumericError(PepipeError):
    """A computation produced NaN/Inf."""


class DimensionError(DataError):
    pass


class ConfigError(DataError):
    pass


class InputError(DataError):
    pass


class StateError(PepipeError):
    pass


class ParseError(DataError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class ValidationError(DataError):
    pass


class DecodeError(DataError):
    pass


class UnsupportedFormatError(DataError):
    pass


class GenerationError(DataError):
    pass


class ConsistencyError(DataError):
    pass


class LoadError(DataError):
    pass


class TrainingError(NumericError):
    def __init__(self, message, step=None):
        self.step = step
        super().__init__(message if step is None else f"{message} (at step {step})")
