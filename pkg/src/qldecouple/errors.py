"""Shared exception types."""


class QLError(Exception):
    """Base class for all library errors."""


class ParseError(QLError):
    def __init__(self, message, position=None):
        self.position = position
        if position is not None:
            message = f"{message} (at position {position})"
        super().__init__(message)


class UnknownSymbol(QLError):
    def __init__(self, name, position=None, where=None):
        self.name = name
        msg = f"unknown symbol '{name}'"
        if where:
            msg = f"{where}: {msg}"
        if position is not None:
            msg += f" (at position {position})"
        super().__init__(msg)


class DomainError(QLError):
    """Evaluation left the operand domain (sqrt of negative, log of
    non-positive, division by zero, non-integer power of a negative base)."""

    def __init__(self, message, node=None):
        self.node = node
        super().__init__(message)


class SchemaError(QLError):
    pass


class NotInverse(QLError):
    pass


class SingularJacobian(QLError):
    pass


class IllConditioned(QLError):
    pass


class MismatchedSignature(QLError):
    pass


class HintInconsistent(QLError):
    pass


class DegenerateSample(QLError):
    pass


class TooLarge(QLError):
    pass


class NotApplicable(QLError):
    pass


class SingularCandidate(QLError):
    pass


class ShootingFailed(QLError):
    pass


class CFLViolation(QLError):
    pass


class BlowupDetected(QLError):
    pass


class GridMismatch(QLError):
    pass


class RetryExhausted(QLError):
    pass


class NonHyperbolic(QLError):
    pass
