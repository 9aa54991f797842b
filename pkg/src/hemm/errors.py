"""Exception types shared across the package."""


class InvalidInputError(ValueError):
    """Arguments have the wrong shape, range or are otherwise unusable."""


class DegeneratePosteriorError(ArithmeticError):
    """Every mixture component assigns zero probability to an observation."""

    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class SchemaError(InvalidInputError):
    """A dataset file violates the column schema."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class NumericalError(RuntimeError):
    """Training produced a non-finite objective or parameter."""

    def __init__(self, message, block=None, diagnostics=None):
        super().__init__(message)
        self.block = block
        self.diagnostics = diagnostics or {}
