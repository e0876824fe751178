"""Exception hierarchy. CLI exit codes hang off the top-level classes."""


class AuditError(Exception):
    exit_code = 1


class ConfigError(AuditError):
    exit_code = 2


class TransportError(AuditError):
    """Network or endpoint failure that survived all retries."""

    exit_code = 3


class TransientError(TransportError):
    """A failure worth retrying (timeouts, 429, 5xx, scripted flakes)."""


class CapabilityError(AuditError):
    """The endpoint answered but lacks something we asked for (e.g. logprobs)."""

    exit_code = 3


class DataError(AuditError):
    exit_code = 4


class FormatVersionError(DataError):
    pass


class ContractError(AuditError, ValueError):
    """A precondition of an operation was violated by the caller."""

    exit_code = 4


class ParseFailure(AuditError):
    """A belief score could not be extracted for one item/method."""


class ThresholdUndefinedError(AuditError):
    """No correct, scored record exists to define a belief threshold."""
