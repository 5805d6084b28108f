"""Exception hierarchy shared across the package.

Exit-code mapping for the CLI: ConfigError -> 2, BackendError -> 3,
ResumableInterruption -> 4; anything else is a bug.
"""


class CritpipeError(Exception):
    """Base class for package errors."""


class ConfigError(CritpipeError):
    """Bad configuration, schema violation, or config drift on resume."""


class BackendError(CritpipeError):
    """A generation backend failed."""


class BackendUnavailable(BackendError):
    """Backend unreachable or retries exhausted."""


class MalformedResponse(BackendError):
    """Backend returned a reply that does not match the wire contract."""


class ReplyParseError(CritpipeError):
    """A model reply could not be parsed into the expected structure."""


class ManifestError(CritpipeError):
    """Run-manifest state machine violation (e.g. upstream stage not done)."""


class ResumableInterruption(CritpipeError):
    """A stage failed in a way that a resume can pick up from the manifest."""
