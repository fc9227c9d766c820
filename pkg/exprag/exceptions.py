class ExpRagError(Exception):
    """Base class for every error raised by the exprag package."""


class InvalidParameterError(ExpRagError, ValueError):
    pass


# --- ingestion -------------------------------------------------------------------------------


class MissingColumnError(ExpRagError):
    def __init__(self, column: str, header: list[str]):
        self.column = column
        super().__init__(f"Required column {column!r} not found in header {header}.")


class MalformedRowError(ExpRagError):
    def __init__(self, line_number: int, expected: int, found: int):
        self.line_number = line_number
        super().__init__(f"Line {line_number}: expected {expected} fields, found {found}.")


class MalformedLineError(ExpRagError):
    def __init__(self, line_number: int, reason: str):
        self.line_number = line_number
        super().__init__(f"Line {line_number}: {reason}")


class ConflictingSubjectError(ExpRagError):
    def __init__(self, admission_key: str, subjects: set[str]):
        self.admission_key = admission_key
        super().__init__(
            f"Admission {admission_key!r} is assigned to several subjects: {sorted(subjects)}."
        )


class UnknownAdmissionError(ExpRagError, LookupError):
    def __init__(self, admission_key: str):
        self.admission_key = admission_key
        super().__init__(f"Admission {admission_key!r} is not part of the cohort.")


# --- segmentation ----------------------------------------------------------------------------


class EmptyBackgroundError(ExpRagError):
    pass


class MissingGoldSectionError(ExpRagError):
    pass


# --- ranking and retrieval -------------------------------------------------------------------


class DimensionMismatchError(ExpRagError, ValueError):
    def __init__(self, left: int, right: int):
        super().__init__(f"Vectors have different dimensions: {left} != {right}.")


class ProviderFailureError(ExpRagError):
    """A model provider returned no usable output."""


class UnknownMethodError(ExpRagError, ValueError):
    def __init__(self, method: str, known: list[str]):
        super().__init__(f"Unknown retrieval method {method!r}; expected one of {known}.")


# --- question generation ---------------------------------------------------------------------


class InsufficientDistractorsError(ExpRagError):
    def __init__(self, needed: int, available: int):
        self.needed = needed
        self.available = available
        super().__init__(f"Needed {needed} distractors, only {available} candidates available.")


class TooFewKeyPointsError(ExpRagError):
    def __init__(self, found: int, minimum: int):
        super().__init__(f"Instruction has {found} key points, at least {minimum} required.")


# --- llm client ------------------------------------------------------------------------------


class UnfilledPlaceholderError(ExpRagError):
    def __init__(self, placeholder: str, template_id: str):
        super().__init__(f"Placeholder {{{placeholder}}} of template {template_id!r} is unfilled.")


class TransportError(ExpRagError):
    """The chat endpoint could not be reached, or kept failing after all retries."""


class TransientTransportError(TransportError):
    """A failure worth retrying (connection reset, 5xx)."""


class RateLimitedError(TransientTransportError):
    pass


class AuthRejectedError(ExpRagError):
    pass


class ContextTooLongError(ExpRagError):
    def __init__(self, size: int, limit: int):
        super().__init__(f"Prompt of {size} characters exceeds the provider limit of {limit}.")


# --- evaluation ------------------------------------------------------------------------------


class EmptyInputError(ExpRagError, ValueError):
    pass


class UndefinedCorrelationError(ExpRagError, ValueError):
    pass


class ZeroBaselineError(ExpRagError, ZeroDivisionError):
    pass


class InsufficientPoolError(ExpRagError):
    def __init__(self, target: str, available: int, requested: int):
        self.target = target
        self.available = available
        self.requested = requested
        super().__init__(
            f"Restricted pool for {target!r} holds {available} candidates, {requested} requested."
        )
