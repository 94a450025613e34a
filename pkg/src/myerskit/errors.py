"""Exception hierarchy shared by all modules."""


class MyersError(Exception):
    """Base class for every error raised by myerskit."""


class ExprSyntaxError(MyersError):
    """Malformed expression text.

    ``offset`` is the byte offset (UTF-8) where parsing failed and
    ``expected`` the set of token kinds that would have been accepted there.
    """

    def __init__(self, message, offset, expected=()):
        self.offset = offset
        self.expected = frozenset(expected)
        detail = f"{message} at byte {offset}"
        if self.expected:
            detail += f" (expected one of: {', '.join(sorted(self.expected))})"
        super().__init__(detail)


class UnknownIdentifier(MyersError):
    def __init__(self, name, offset):
        self.name = name
        self.offset = offset
        super().__init__(f"unknown identifier {name!r} at byte {offset}")


class DomainError(MyersError):
    """A sub-expression was evaluated outside its domain (or produced NaN/Inf)."""


class NonSPDMetric(MyersError):
    pass


class ChartBoundary(MyersError):
    pass


class StepOutOfAtlas(MyersError):
    pass


class InsufficientDecayWindow(MyersError):
    pass


class MeshTooCoarse(MyersError):
    pass


class NoConvergence(MyersError):
    def __init__(self, message, residual=float("nan")):
        self.residual = residual
        super().__init__(f"{message} (residual {residual:.3e})")


class CriterionFails(MyersError):
    """Raised when a quantity only exists if Delta^h - rho^h < 0."""


class ExcludedPathsError(MyersError):
    pass


class ConfigError(MyersError):
    def __init__(self, message, key_path=""):
        self.key_path = key_path
        super().__init__(f"{key_path}: {message}" if key_path else message)
