"""Exception types shared across the package."""


class SteerkitError(Exception):
    """Base class for errors raised by this package."""


class RegistrationError(SteerkitError):
    """Registering a steerable variable failed (duplicate name, unknown kind,
    or the registry is already sealed)."""


class BatchRejected(SteerkitError):
    """An update batch failed validation. The registry is left untouched."""


class LifecycleError(SteerkitError):
    """An operation was attempted outside its valid lifecycle window."""


class ProtocolError(SteerkitError):
    """A message could not be encoded, or a byte stream is corrupt."""


class ConsistencyError(SteerkitError):
    """Cross-worker state disagreed where it must not (e.g. mixed epochs
    at gather). Indicates a bug, never expected in normal operation."""


class ScriptFailure(SteerkitError):
    """A scripted expectation failed (expect_level mismatch, await timeout)."""


class StartupError(SteerkitError):
    """The server or a tool could not start (bad config, busy port,
    unreadable scenario or tree file)."""


class ThresholdBreach(SteerkitError):
    """A benchmark result exceeded an enforced threshold."""
