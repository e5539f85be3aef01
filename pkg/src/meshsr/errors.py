"""Exception types shared across the package."""


class MeshSRError(Exception):
    """Base class for all package errors."""


class DimensionError(MeshSRError, ValueError):
    """Operand shapes are incompatible."""


class ContractError(MeshSRError, ValueError):
    """A precondition of an operation was violated."""


class ConfigError(MeshSRError, ValueError):
    """A configuration is missing required information."""


class ValidationError(MeshSRError, ValueError):
    """A dataset or configuration fails its invariants."""


class ParseError(MeshSRError, ValueError):
    """An on-disk file could not be parsed."""

    def __init__(self, path, record, message):
        self.path = str(path)
        self.record = record
        super().__init__(f"{self.path}: record {record}: {message}")


class SolverError(MeshSRError, RuntimeError):
    """An iterative solver failed to reach its tolerance."""

    def __init__(self, message, residual):
        self.residual = residual
        super().__init__(f"{message} (residual {residual:.3e})")


class DivergenceError(MeshSRError, RuntimeError):
    """Training produced a non-finite or exploding loss."""

    def __init__(self, message, dump_path=None):
        self.dump_path = dump_path
        if dump_path is not None:
            message = f"{message}; state dumped to {dump_path}"
        super().__init__(message)
