"""Exception hierarchy shared by every module."""


class DiffSarError(Exception):
    """Base class for all library errors."""

    exit_code = 2


class ValidationError(DiffSarError, ValueError):
    pass


class ParseError(ValidationError):
    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class TopologyError(ValidationError):
    pass


class DegenerateFaceError(ValidationError):
    def __init__(self, face_index):
        super().__init__(f"zero-area face {face_index}")
        self.face_index = face_index


class ShapeError(ValidationError):
    pass


class ContractError(ValidationError):
    pass


class NumericError(DiffSarError, ArithmeticError):
    exit_code = 3
