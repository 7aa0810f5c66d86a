"""Exception hierarchy shared across the package.

Every error the CLI can surface maps to one of these so the entry point can
print a single categorized line and pick a stable exit code.
"""


class MemreportError(Exception):
    """Base class for all package errors."""

    category = "internal"
    exit_code = 1


class ShapeError(MemreportError, ValueError):
    """Operand ranks or dimensions are incompatible; message carries both shapes."""

    category = "shape"
    exit_code = 2


class ContractError(MemreportError, ValueError):
    """An API precondition was violated (bad argument, missing grad, etc.)."""

    category = "contract"
    exit_code = 2


class ConfigError(MemreportError, ValueError):
    """Run configuration failed validation."""

    category = "config"
    exit_code = 3


class DataError(MemreportError, ValueError):
    """A dataset or artifact file is malformed; message carries the location."""

    category = "data"
    exit_code = 4


class VocabMismatchError(MemreportError, ValueError):
    """Checkpoint and dataset vocabularies disagree."""

    category = "vocab"
    exit_code = 5


class DivergenceError(MemreportError, RuntimeError):
    """Training hit a non-finite loss; message points at the dumped batch."""

    category = "diverged"
    exit_code = 6
