"""Exception types shared across the package."""


class ContractError(ValueError):
    """A precondition on an argument was violated."""


class ShapeError(ContractError):
    """Operand shapes do not conform."""


class DomainError(ValueError):
    """A value lies outside the mathematical domain of an operation."""


class TapeError(RuntimeError):
    """Misuse of a gradient tape (wrong tape, reused tape, ...)."""


class OracleInvalidError(RuntimeError):
    """The finite-difference oracle cannot be trusted for this loss."""


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""
