"""Exception types shared across the package.

The CLI maps these onto process exit codes: FormatError -> 3,
ShapeError / ContractError / NumericError -> 4.
"""


class KfbfError(Exception):
    pass


class ShapeError(KfbfError, ValueError):
    """Operand dimensions do not line up."""


class ContractError(KfbfError, ValueError):
    """A documented precondition was violated (non-scalar loss, K mismatch, ...)."""


class NumericError(KfbfError, ArithmeticError):
    """Non-finite values where finite ones are required."""


class FormatError(KfbfError, ValueError):
    """Malformed dataset / checkpoint file. Message names the byte offset."""
