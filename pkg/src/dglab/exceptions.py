"""Exception hierarchy. CLI exit codes hang off ``exit_code``."""


class DGLabError(Exception):
    exit_code = 1


class ConfigError(DGLabError, ValueError):
    """Invalid configuration or hyperparameter."""

    exit_code = 1


class UsageError(DGLabError, ValueError):
    """An API was called in a way its contract forbids."""

    exit_code = 1


class DataError(DGLabError, ValueError):
    """Input data has the wrong shape, range or content."""

    exit_code = 2


class DimensionError(DataError):
    pass


class ParseError(DataError):
    """A file on disk could not be decoded."""


class SchemaError(DataError):
    """A file's header or layout does not match what the reader expects."""


class NumericalError(DGLabError, ArithmeticError):
    """A loss or gradient became non-finite."""

    exit_code = 3


class OracleError(NumericalError):
    pass


class UnsupportedError(UsageError):
    pass
