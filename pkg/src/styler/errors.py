"""Exception hierarchy. Each class carries the CLI exit code and error kind."""


class StylerError(Exception):
    exit_code = 1
    kind = "internal"


class ConfigError(StylerError, ValueError):
    exit_code = 2
    kind = "config"


class ShapeError(ConfigError):
    kind = "shape"


class UnknownTokenError(ConfigError, KeyError):
    kind = "token"

    def __str__(self):
        return Exception.__str__(self)


class CorruptFileError(ConfigError):
    kind = "corrupt-file"


class PlanError(StylerError, ValueError):
    """Invalid spatial or temporal composition plan (overlap, gap, ...)."""

    exit_code = 3
    kind = "plan"


class NumericError(StylerError, ArithmeticError):
    exit_code = 4
    kind = "numeric"
