"""Exception hierarchy shared by the package."""


class FedNPRError(Exception):
    """Base class for all package errors."""


class ShapeError(FedNPRError, ValueError):
    pass


class NumericError(FedNPRError, ArithmeticError):
    pass


class DegenerateFeatureError(FedNPRError, ValueError):
    """A feature row collapsed to (near) zero norm."""


class ConvergenceError(FedNPRError, RuntimeError):
    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


class EmptyClusterError(FedNPRError, ValueError):
    def __init__(self, message, cluster=None):
        super().__init__(message)
        self.cluster = cluster


class MissingPrototypeError(FedNPRError, KeyError):
    pass


class LabelError(FedNPRError, ValueError):
    pass


class EmptyPriorError(FedNPRError, ValueError):
    pass


class ConfigError(FedNPRError, ValueError):
    def __init__(self, message, key=None):
        if key:
            message = f"{key}: {message}"
        super().__init__(message)
        self.key = key


class AggregationError(FedNPRError, ValueError):
    pass


class PartitionError(FedNPRError, RuntimeError):
    pass


class SplitError(FedNPRError, ValueError):
    pass


class MetricError(FedNPRError, ValueError):
    pass
