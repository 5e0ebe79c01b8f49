"""Exception hierarchy shared by every tide module."""


class TideError(Exception):
    pass


class DimError(TideError, ValueError):
    """Tensor shapes or axes do not fit the operation."""


class ConfigError(TideError, ValueError):
    pass


class FormatError(TideError, ValueError):
    """Box format mismatch or corrupt on-disk record."""


class ParseError(TideError, ValueError):
    pass


class SamplingError(TideError, RuntimeError):
    pass


class NumericError(TideError, ArithmeticError):
    """NaN or Inf appeared where a finite value is required."""


class DataError(TideError, ValueError):
    pass
