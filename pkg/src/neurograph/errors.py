"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Operand shapes are incompatible with an operation."""


class ContractError(ValueError):
    """A precondition of an operation does not hold."""


class ParseError(ValueError):
    """A file could not be parsed; the message names the file and position."""

    def __init__(self, path, message, line=None, offset=None):
        where = str(path)
        if line is not None:
            where += f":{line}"
        if offset is not None:
            where += f" (byte {offset})"
        super().__init__(f"{where}: {message}")
        self.path = path
        self.line = line
        self.offset = offset


class NumericalAbort(RuntimeError):
    """Training produced a non-finite loss."""
