"""Exception types shared across the package.

The CLI maps each family to its own exit code, so raise the most specific
class that applies.
"""


class AshPlusError(Exception):
    """Base class for all package errors."""


class ShapeError(AshPlusError, ValueError):
    pass


class InvalidInputError(AshPlusError, ValueError):
    pass


class DegenerateInputError(InvalidInputError):
    pass


class InvalidLabelError(InvalidInputError):
    pass


class ConfigError(AshPlusError, ValueError):
    pass


class IngestionError(AshPlusError, OSError):
    pass


class EmptyDatasetError(IngestionError):
    pass


class CheckpointError(AshPlusError, OSError):
    pass


class CorruptCheckpointError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass
