"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: data/format problems exit 2, numeric
failures exit 3.
"""


class UrbanFillError(Exception):
    exit_code = 2


class IngestError(UrbanFillError):
    pass


class FormatError(UrbanFillError):
    pass


class ParameterError(UrbanFillError, ValueError):
    pass


class ShapeError(UrbanFillError, ValueError):
    pass


class ConfigError(UrbanFillError, ValueError):
    pass


class ContractError(UrbanFillError):
    pass


class ImputerError(UrbanFillError):
    pass


class UndefinedMetricError(UrbanFillError, ValueError):
    pass


class NumericError(UrbanFillError, ArithmeticError):
    exit_code = 3
