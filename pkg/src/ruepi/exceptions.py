class RuePiError(Exception):
    """ Base exception class """


class ConfigError(RuePiError, ValueError):
    """ Raised when a configuration value is out of range or inconsistent. """


class DataError(RuePiError):
    """ Raised when input data cannot be used as given. """


class CsvParseError(DataError):
    def __init__(self, message, path=None, line=None, *args, **kwargs):
        super(CsvParseError, self).__init__(message, *args, **kwargs)
        self.path = path
        self.line = line


class SchemaError(DataError):
    def __init__(self, message, channels=(), *args, **kwargs):
        super(SchemaError, self).__init__(message, *args, **kwargs)
        self.channels = list(channels)


class DimensionError(DataError, ValueError):
    """ Raised when array shapes do not line up. """


class NumericError(RuePiError):
    """ Base class for numerical failures. """


class TrainingDivergedError(NumericError):
    def __init__(self, message, learning_rate=None, epoch=None, *args, **kwargs):
        super(TrainingDivergedError, self).__init__(message, *args, **kwargs)
        self.learning_rate = learning_rate
        self.epoch = epoch


class SingularCovarianceError(NumericError):
    def __init__(self, message, condition=None, *args, **kwargs):
        super(SingularCovarianceError, self).__init__(message, *args, **kwargs)
        self.condition = condition


class UndefinedStatisticError(NumericError, ValueError):
    """ Raised when a statistic has no defined value for the given sample. """
