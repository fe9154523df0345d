"""Exception types shared across the package."""


class InvalidArgument(ValueError):
    pass


class ShapeMismatch(ValueError):
    pass


class InvalidState(RuntimeError):
    pass


class UnsupportedOrder(ValueError):
    """Raised for tensors of order < 3; use a plain truncated SVD there."""


class ExecutionFailure(Exception):
    """A split could not be executed (the bottom value of program semantics).

    ``expr_index`` is the position of the failing expression when known.
    """

    def __init__(self, message: str, expr_index: int = None):
        super().__init__(message)
        self.expr_index = expr_index
