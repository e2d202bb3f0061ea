"""Exception types shared across the package.

Plain ValueError is used for bad arguments; the classes here cover the
failure modes that need to be told apart by callers (corrupt files,
numeric blowups, misuse of a consumed autodiff graph).
"""


class ManifestError(ValueError):
    """A manifest line failed to parse or violates a record invariant."""

    def __init__(self, message, line=None, record_id=None):
        prefix = []
        if line is not None:
            prefix.append(f"line {line}")
        if record_id is not None:
            prefix.append(f"record {record_id!r}")
        if prefix:
            message = f"{', '.join(prefix)}: {message}"
        super().__init__(message)
        self.line = line
        self.record_id = record_id


class IntegrityError(RuntimeError):
    """Stored data does not match what its metadata promises."""


class NumericError(ArithmeticError):
    """A computation produced non-finite values or failed a numeric check."""


class GraphConsumedError(RuntimeError):
    """backward() was called again on an already-consumed graph."""
