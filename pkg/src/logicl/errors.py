"""Exception hierarchy shared by all pipeline stages.

Exit-code mapping for the CLI: validation problems exit 1, a missing
prior-stage artifact exits 2, oracle/transport failures exit 3, anything
else exits 4.
"""


class LogiclError(Exception):
    """Base class for all errors raised by this package."""

    exit_code = 4


class ConfigError(LogiclError):
    """Invalid configuration: bad regex, out-of-range field, unparseable file."""

    exit_code = 1


class EmptyCorpusError(LogiclError):
    """Grouping or loading produced no sequences."""

    exit_code = 1


class CorpusFormatError(LogiclError):
    """Malformed corpus file (bad JSON line, missing field)."""

    exit_code = 1


class DegenerateInputError(LogiclError):
    """Input that maps to a zero vector or otherwise breaks a numeric precondition."""


class TransportError(LogiclError):
    """Remote endpoint unreachable or failing after all retries."""

    exit_code = 3


class OracleParseError(LogiclError):
    """LLM response carried no parsable probability."""

    exit_code = 3

    def __init__(self, message, raw_text=""):
        super().__init__(message)
        self.raw_text = raw_text


class CacheInvalidError(LogiclError):
    """Persisted cache does not match the current encoder fingerprints."""


class MatrixFormatError(LogiclError):
    """Delta matrix file corrupt or truncated."""

    def __init__(self, message, line_no=None):
        super().__init__(message)
        self.line_no = line_no


class MissingArtifactError(LogiclError):
    """A pipeline stage was invoked before its prerequisite stage."""

    exit_code = 2


class UninformativeBatchError(LogiclError):
    """No anchor in the batch has a positive; the contrastive term is undefined."""
