"""Exception taxonomy shared across the package.

The CLI maps these onto process exit codes: contract/data problems exit
with 3, numerical failures (divergence, non-convergence, degeneracy)
with 4. Usage errors are argparse's domain and exit with 2.
"""


class DimensionError(ValueError):
    """Shapes disagree with an operation's contract."""


class ContractError(ValueError):
    """A precondition on values or configuration is violated."""


class DataError(ValueError):
    """A file or dataset is malformed, missing, or inconsistent."""


class ResourceError(ValueError):
    """A size cap meant to keep the lab desk-scale was exceeded."""


class ConvergenceError(RuntimeError):
    """An iterative solver hit its iteration cap before its tolerance."""


class DegeneracyError(RuntimeError):
    """A numerically degenerate intermediate (e.g. an empty slice) was hit."""


class TrainingError(RuntimeError):
    """Training diverged (NaN or exploding loss)."""
