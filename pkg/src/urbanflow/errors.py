"""Exception hierarchy shared across the package."""


class UrbanFlowError(Exception):
    """Base class for all errors raised by this package."""


class GraphError(UrbanFlowError):
    """Invalid graph construction or operator request."""


class DataError(UrbanFlowError):
    """Dataset loading, generation, or format violation."""


class ConfigError(UrbanFlowError):
    """Invalid or inconsistent configuration."""


class TrainingError(UrbanFlowError):
    """Runtime failure during a training phase (non-finite loss etc.)."""
