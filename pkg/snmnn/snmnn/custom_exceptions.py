# This file implements the exceptions shared by every module of the
# package. They live here rather than in the modules themselves because
# the modules import each other (fusion imports geodesy and flightlog,
# the cli imports everything) and the CLI maps the three families below
# onto its exit codes.

from typing import Any, Optional, Sequence


class SnmnnError(Exception):
    '''
    Root of every error raised on purpose by this package.
    '''

    def __reduce__(self):
        # type: () -> Any
        # subclasses with their own __init__ store its arguments in init_args
        return (type(self), getattr(self, 'init_args', self.args))


class ConfigValidationError(SnmnnError):
    '''
    Raise if a config value (from a file, a flag or a constructor) is
    missing, has the wrong type or lies outside its allowed range.
    '''


class DataError(SnmnnError):
    '''
    Raise if input data (a model file, a flight log, a set of
    coordinates) cannot be used.
    '''


class NumericalError(SnmnnError):
    '''
    Raise if a computation produced NaN/Inf or left its stable regime.
    '''


class DimensionError(DataError):
    def __init__(self, what, expected, actual):
        # type: (str, int, int) -> None
        self.what = what
        self.expected = expected
        self.actual = actual
        super().__init__('{}: expected dimension {}, got {}'.format(what, expected, actual))
        self.init_args = (what, expected, actual)


class ModelFormatError(DataError):
    pass


class ModelVersionError(ModelFormatError):
    pass


class TruncatedModelError(ModelFormatError):
    pass


class ModelDimensionError(ModelFormatError):
    pass


class FlightLogError(DataError):
    def __init__(self, message, source=None, line=None, column=None):
        # type: (str, Optional[str], Optional[int], Optional[str]) -> None
        self.source = source
        self.line = line
        self.column = column
        location = []
        if source is not None:
            location.append(source)
        if line is not None:
            location.append('line {}'.format(line))
        if column is not None:
            location.append('column {}'.format(column))
        self.init_args = (message, source, line, column)
        if location:
            message = '{}: {}'.format(', '.join(location), message)
        super().__init__(message)


class MissingColumnError(FlightLogError):
    def __init__(self, missing, source=None):
        # type: (Sequence[str], Optional[str]) -> None
        self.missing = list(missing)
        super().__init__('missing column(s): {}'.format(', '.join(self.missing)), source=source)
        self.init_args = (missing, source)


class NonMonotonicTimeError(FlightLogError):
    pass


class RangeError(FlightLogError):
    pass


class MalformedValueError(FlightLogError):
    pass


class ResampleError(DataError):
    pass


class DatasetError(DataError):
    pass


class GeodesyError(DataError):
    pass


class RotorSpeedError(DataError):
    pass


class DivergenceError(NumericalError):
    def __init__(self, epoch, sample, what):
        # type: (int, int, str) -> None
        self.epoch = epoch
        self.sample = sample
        super().__init__('non-finite {} at epoch {}, sample {}'.format(what, epoch, sample))
        self.init_args = (epoch, sample, what)


class SimulationError(NumericalError):
    def __init__(self, step, message='non-finite state'):
        # type: (int, str) -> None
        self.step = step
        super().__init__('{} at step {}'.format(message, step))
        self.init_args = (step, message)


class ControllerDivergenceError(NumericalError):
    pass
