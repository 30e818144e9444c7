"""Exception types shared across the toolkit.

The CLI maps these onto exit codes: validation problems (bad inputs,
malformed files, shape conflicts) exit with 2, numeric failures
(factorization non-convergence, degenerate statistics) exit with 3.
"""


class ValidationError(ValueError):
    """Input violates a documented precondition or schema."""


class ShapeError(ValidationError):
    """Array dimensions incompatible with the requested operation."""


class FormatError(ValidationError):
    """On-disk blob or manifest is malformed (bad magic, version, field)."""


class BlobIOError(ValidationError):
    """A referenced file is missing or truncated."""


class TopologyError(ValidationError):
    """A partial forward pass would need a value that is not available."""


class DomainError(ValidationError):
    """Mathematically undefined for this input (e.g. zero matrix)."""


class NumericError(RuntimeError):
    """An iterative numeric routine failed to converge."""
