"""Exception hierarchy shared by every stage of the pipeline."""


class SSLChangeError(Exception):
    """Base class; the CLI turns these into a JSON error payload."""


class ConfigurationError(SSLChangeError, ValueError):
    pass


class DataError(SSLChangeError, ValueError):
    pass


class ShapeError(SSLChangeError, ValueError):
    pass


class ArchitectureError(SSLChangeError, ValueError):
    pass


class StateError(SSLChangeError, RuntimeError):
    pass


class TrainingDivergedError(SSLChangeError, RuntimeError):
    pass


class StageMismatchError(SSLChangeError, RuntimeError):
    """An existing stage checkpoint was produced by a different config."""
