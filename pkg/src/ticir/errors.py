"""Exception hierarchy shared across the toolkit."""


class TicirError(Exception):
    """Base class for all toolkit errors."""


class InputError(TicirError, ValueError):
    """A caller-supplied value violates an operation's preconditions."""


class FormatError(TicirError, ValueError):
    """A file or payload does not match its expected format or schema."""


class NumericError(TicirError, ArithmeticError):
    """A numeric contract was violated (zero vector, non-finite value, ...)."""


class MissingConceptError(TicirError, KeyError):
    """A concept required for phrase sampling is absent from the bank."""

    def __init__(self, concept: str):
        super().__init__(concept)
        self.concept = concept

    def __str__(self) -> str:
        return f"concept {self.concept!r} has no phrases in the bank"


class ConfigError(TicirError, ValueError):
    """Invalid run configuration (CLI exit code 2)."""


class DatasetValidationError(FormatError):
    """Schema violation in an annotation file, pinpointing the record."""

    def __init__(self, message: str, record_index: int | None = None, field: str | None = None):
        where = []
        if record_index is not None:
            where.append(f"record {record_index}")
        if field is not None:
            where.append(f"field {field!r}")
        prefix = " ".join(where)
        super().__init__(f"{prefix}: {message}" if prefix else message)
        self.record_index = record_index
        self.field = field


class TrainingAborted(TicirError, RuntimeError):
    """Optimization hit a non-finite loss; carries the last good state."""

    def __init__(self, message: str, last_good_state: dict | None = None, history: list | None = None):
        super().__init__(message)
        self.last_good_state = last_good_state
        self.history = history or []
