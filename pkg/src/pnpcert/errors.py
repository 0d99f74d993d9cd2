"""Exception types shared across the package."""


class ShapeError(ValueError):
    """An input vector or matrix has the wrong dimension."""


class InvalidParameterError(ValueError):
    """A scalar parameter is outside its admissible range."""


class NonConvergenceError(RuntimeError):
    """An inner fixed-point solve ran out of iterations."""


class DivergenceError(RuntimeError):
    """Solver iterates blew up."""


class PreconditionError(ValueError):
    """A run was requested on inputs that violate its stated preconditions."""
