"""Exception hierarchy shared across the package."""


class HyperAlignError(Exception):
    """Base class for all package errors."""


class ShapeError(HyperAlignError, ValueError):
    pass


class DomainError(HyperAlignError, ValueError):
    """A value left the domain of an operation, or became non-finite."""


class TapeError(HyperAlignError, RuntimeError):
    pass


class ManifoldError(HyperAlignError, ValueError):
    pass


class OriginConeError(DomainError):
    """Entailment cone requested at the hyperboloid origin, where it is undefined."""


class DegeneratePairError(DomainError):
    pass


class BatchTooSmallError(HyperAlignError, ValueError):
    pass


class SplitError(HyperAlignError, ValueError):
    pass


class ConfigError(HyperAlignError, ValueError):
    """Invalid configuration value. ``field`` names the offending key when known."""

    def __init__(self, message, field=None):
        super().__init__(message)
        self.field = field


class OptimError(HyperAlignError, RuntimeError):
    def __init__(self, message, param=None):
        super().__init__(message)
        self.param = param


class CheckpointError(HyperAlignError, ValueError):
    def __init__(self, message, field=None):
        super().__init__(message)
        self.field = field
