"""Exception hierarchy shared by every ccnet module."""


class CCNetError(Exception):
    pass


class ShapeError(CCNetError, ValueError):
    pass


class ConfigError(CCNetError, ValueError):
    pass


class InputError(CCNetError, ValueError):
    pass


class FormatError(CCNetError, ValueError):
    pass


class OracleError(CCNetError, ArithmeticError):
    pass


class TrainingError(CCNetError, ArithmeticError):
    pass


class MetricError(CCNetError, ValueError):
    pass
