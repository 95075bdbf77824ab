"""Exception hierarchy shared by all mefcast modules.

Three families matter to callers: configuration/usage problems, data
problems, and numeric failures. The CLI maps them to exit codes 1/2/3 and
the HTTP service maps them to 400/422/500.
"""


class MefcastError(Exception):
    """Base class for all errors raised by this package."""

    kind = "data"


class ConfigError(MefcastError):
    """Invalid configuration document or invalid argument combination."""

    kind = "usage"


class DataError(MefcastError):
    """Malformed, inconsistent, or insufficient input data."""

    kind = "data"


class SchemaError(DataError):
    """CSV header or JSON payload does not match the documented schema."""


class RowError(DataError):
    """A single data row could not be parsed."""

    def __init__(self, message: str, line_number: int):
        super().__init__(f"line {line_number}: {message}")
        self.line_number = line_number


class SeriesError(DataError):
    """A series-level validation failure (empty, mixed regions, bad gap)."""


class AuthenticationError(DataError):
    """Remote API rejected or was never given credentials."""


class TransportError(DataError):
    """Remote API unreachable after exhausting retries."""


class DecodeError(DataError):
    """Remote API returned a body that is not the expected JSON shape."""


class InfeasibleError(DataError):
    """Dispatch demand exceeds total fleet capacity."""


class NumericError(MefcastError):
    """A non-finite value appeared where the contract requires finite math."""

    kind = "numeric"
