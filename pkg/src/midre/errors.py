"""Exception hierarchy shared by every module."""


class MidreError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(MidreError, ValueError):
    pass


class InvalidPolicy(ConfigError):
    pass


class GeometryError(MidreError):
    pass


class ShapeError(MidreError, ValueError):
    pass


class FormatError(MidreError):
    pass


class InvariantError(MidreError):
    pass


class DivergenceError(MidreError, FloatingPointError):
    pass


class MissingIdentityError(MidreError, KeyError):
    pass


class DegenerateError(MidreError, ArithmeticError):
    pass
