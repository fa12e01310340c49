"""Exception hierarchy. Each category maps to a CLI exit code."""


class CascadeError(Exception):
    exit_code = 1
    category = "error"


class ConfigError(CascadeError, ValueError):
    exit_code = 2
    category = "config"


class DataError(CascadeError, ValueError):
    exit_code = 3
    category = "data"


class DivergenceError(CascadeError, ArithmeticError):
    exit_code = 4
    category = "divergence"


class ShapeError(ConfigError):
    """Raised when a tile size does not survive the valid-conv / pooling walk."""


class EmptyMaskError(DataError):
    pass


class VVFError(DataError):
    pass
