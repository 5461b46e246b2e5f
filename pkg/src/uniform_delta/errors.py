"""Exception hierarchy shared by all modules."""


class UniformDeltaError(Exception):
    """Base class for library errors."""


class DomainError(UniformDeltaError, ValueError):
    """A point lies outside (or on the boundary of) a map's domain."""


class RankError(UniformDeltaError, ValueError):
    """A Jacobian row has (numerically) zero norm."""


class DegenerateError(UniformDeltaError, ValueError):
    """Remainder requested at t == m."""


class DimensionError(UniformDeltaError, ValueError):
    pass


class EmptyError(UniformDeltaError, ValueError):
    pass


class NotPSDError(UniformDeltaError, ValueError):
    pass


class UnknownBuiltin(UniformDeltaError, KeyError):
    pass


class OptimFail(UniformDeltaError, RuntimeError):
    pass


class SingularHessian(UniformDeltaError, ArithmeticError):
    pass
