"""Shared exception types."""


class EnggraphError(Exception):
    """Base class for all toolkit errors."""


class ShapeError(EnggraphError, ValueError):
    """Array dimensions do not conform to the operation's contract."""


class NumericDomainError(EnggraphError, ValueError):
    """Input outside the numeric domain of a primitive (log of non-positive, exp overflow)."""


class ContractError(EnggraphError, ValueError):
    """A documented precondition of an operation was violated."""


class TapeStateError(EnggraphError, RuntimeError):
    """Tape used in a way its lifecycle forbids (e.g. backward run twice)."""


class TrainingDivergedError(EnggraphError, RuntimeError):
    """Non-finite gradient encountered during optimization."""

    def __init__(self, param_name, message=None):
        self.param_name = param_name
        super().__init__(message or f"non-finite gradient for parameter '{param_name}'")


class DegenerateGeometryError(EnggraphError, ValueError):
    """Mesh fails a geometric sanity requirement (isolated vertex, zero-area triangle)."""


class AsymmetricGeometryError(EnggraphError, ValueError):
    """Mesh is not bilaterally symmetric enough for symmetry-aware processing."""


class SchemaError(EnggraphError, ValueError):
    """Structured input is missing required entries or carries unknown ones."""


class ConfigError(EnggraphError, ValueError):
    """Invalid run or generation configuration."""


class InvalidSampleError(EnggraphError, ValueError):
    """A data sample violates its invariants (e.g. identically zero mode field)."""
