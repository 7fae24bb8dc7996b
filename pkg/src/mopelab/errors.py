"""Exception hierarchy shared by all mopelab modules."""


class MopeError(Exception):
    """Base class for every error raised by mopelab."""


class DimensionError(MopeError, ValueError):
    pass


class ParameterError(MopeError, ValueError):
    pass


class ContractError(MopeError, ValueError):
    pass


class ConfigError(MopeError, ValueError):
    pass


class DataError(MopeError, ValueError):
    pass


class NumericError(MopeError, ArithmeticError):
    pass
