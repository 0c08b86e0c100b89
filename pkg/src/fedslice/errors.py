"""Exception hierarchy shared across the package."""


class FedsliceError(Exception):
    """Base class for all package-specific errors."""


class ShapeError(FedsliceError):
    """Tensor dimensions incompatible with the requested operation."""


class ValidationError(FedsliceError):
    """Input violates a documented precondition."""


class ConfigError(FedsliceError):
    """A configuration is malformed or infeasible."""


class NumericError(FedsliceError):
    """Non-finite values where finiteness is required."""


class FormatError(FedsliceError):
    """A serialized container is corrupt or malformed."""


class AggregationError(FedsliceError):
    """A client update cannot be merged into the global model."""
