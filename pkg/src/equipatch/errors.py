"""Exception taxonomy shared across the package.

The CLI maps these onto process exit codes; library callers can catch the
base classes.
"""


class EquipatchError(Exception):
    """Base class for all package errors."""


class ShapeError(EquipatchError, ValueError):
    """Tensor dimensions are incompatible with the requested operation."""


class GeometryError(EquipatchError, ValueError):
    """Convolution geometry is impossible (kernel larger than padded extent, ...)."""


class ContractError(EquipatchError, RuntimeError):
    """An API contract was violated (backward twice, detached graph, spec mismatch)."""


class ConfigError(EquipatchError, ValueError):
    """A run configuration failed to parse or validate."""


class DataError(EquipatchError, ValueError):
    """Dataset layout or split constraints were violated."""


class CheckpointFormatError(EquipatchError, RuntimeError):
    """Checkpoint magic or version is not recognized."""


class CheckpointCorruptionError(EquipatchError, RuntimeError):
    """Checkpoint payload is truncated or inconsistent with its descriptor."""


class TrainingDivergedError(EquipatchError, RuntimeError):
    """Training produced a non-finite loss."""


class DegenerateVarianceError(EquipatchError, ValueError):
    """A statistic is undefined because the sample variance is zero."""
