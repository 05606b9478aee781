"""Exception hierarchy shared across the package."""


class FundustrackError(Exception):
    """Base class for all package-specific errors."""


# --- image decoding / preprocessing ---

class UnsupportedFormat(FundustrackError):
    """Input bytes are not a recognized PNG or PPM stream."""


class CorruptData(FundustrackError):
    """Recognized format, but the byte stream is truncated or inconsistent."""


class TooSmall(FundustrackError):
    """Decoded image is below the minimum supported dimension."""


class BadParams(FundustrackError):
    """Operation parameters violate a documented precondition."""


# --- grading adapters / metric schema ---

class AdapterError(FundustrackError):
    """Base class for failures while running an external grading adapter."""


class AdapterTimeout(AdapterError):
    """The adapter process exceeded its configured timeout and was killed."""


class AdapterCrashed(AdapterError):
    """The adapter process exited with a nonzero status."""


class AdapterBadOutput(AdapterError):
    """The adapter's stdout was not a single parseable JSON document."""


class ValidationError(FundustrackError):
    """Base class for metric-document validation failures."""


class MissingField(ValidationError):
    def __init__(self, field: str):
        super().__init__(f"required field missing: {field}")
        self.field = field


class OutOfRange(ValidationError):
    def __init__(self, field: str, value, detail: str = ""):
        msg = f"field {field} out of range: {value!r}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)
        self.field = field
        self.value = value


class UnknownMetric(FundustrackError):
    """Metric name is not part of the scan-metric schema."""


class DegenerateChord(FundustrackError):
    """Chain is closed or too short for a chord to be defined."""


# --- trend store ---

class StoreError(FundustrackError):
    """Base class for persistence-layer failures."""


class UnknownUser(StoreError):
    def __init__(self, user_id: str):
        super().__init__(f"unknown user: {user_id}")
        self.user_id = user_id


class DuplicateScan(StoreError):
    """A scan with the same idempotency key already exists for this user."""

    def __init__(self, scan_id: str):
        super().__init__(f"duplicate scan, original id: {scan_id}")
        self.scan_id = scan_id


# --- interpretation client ---

class InterpretationError(FundustrackError):
    """Base class for remote-interpretation failures; callers fall back."""


class EndpointUnreachable(InterpretationError):
    """Connection to the interpretation endpoint could not be established."""


class EndpointError(InterpretationError):
    """The interpretation endpoint answered with a non-2xx status."""

    def __init__(self, status_code: int, body: str = ""):
        super().__init__(f"interpretation endpoint returned {status_code}")
        self.status_code = status_code
        self.body = body


class InterpretationTimeout(InterpretationError):
    """The interpretation request exceeded its per-attempt timeout."""
