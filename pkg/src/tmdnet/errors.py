"""Exception types shared across the toolkit."""


class TmdError(Exception):
    pass


class ParseError(TmdError, ValueError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class ValidationError(TmdError, ValueError):
    pass


class ShapeError(ValidationError):
    pass


class NumericError(TmdError, ArithmeticError):
    pass


class ConfigError(TmdError, KeyError):
    def __str__(self):
        return str(self.args[0]) if self.args else ""


class TooShortError(ValidationError):
    pass
