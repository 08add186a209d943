"""Exception hierarchy shared across the gateway, node agents, and simulator.

Everything user-facing derives from UdigateError so CLI and HTTP layers can
map errors to exit codes / status codes in one place.
"""


class UdigateError(Exception):
    """Base class for all errors raised by this package."""


class InvalidReference(UdigateError):
    """Image reference text could not be parsed."""


class NotFound(UdigateError):
    """Lookup missed: unknown record, uid, mount, or path."""


# --- credential / auth -----------------------------------------------------

class AuthError(UdigateError):
    """Base for credential validation failures."""


class MacMismatch(AuthError):
    """Credential MAC does not verify against the shared secret."""


class CredentialExpired(AuthError):
    """Credential issued_at is older than the configured ttl."""


class AuthServiceDown(AuthError):
    """The credential service itself is unavailable.

    Deliberately distinct from MacMismatch: an unreachable authenticator must
    never read as "bad credential".
    """


# --- registry --------------------------------------------------------------

class RegistryError(UdigateError):
    """Base for upstream registry failures."""


class RegistryUnknownImage(RegistryError):
    pass


class RegistryIoError(RegistryError):
    """Connection refused, stream aborted with an error, or similar."""


class DigestMismatch(RegistryError):
    """Fetched blob bytes do not hash to the requested digest."""


# --- conversion ------------------------------------------------------------

class ConversionError(UdigateError):
    """Flatten / site-modify / archive-write failure."""


class EmptyLayerList(ConversionError):
    pass


class MalformedLayer(ConversionError):
    pass


class ModConflict(ConversionError):
    """A site modification contradicts the image tree (e.g. file over dir)."""


class VerifyError(ConversionError):
    """Freshly written archive failed verification; record must not go READY."""


# --- archive / storage -----------------------------------------------------

class UdiCorrupt(UdigateError):
    """Archive bytes rejected: bad magic, truncation, or checksum mismatch."""

    def __init__(self, reason: str, path: str = ""):
        super().__init__(f"{reason}: {path}" if path else reason)
        self.reason = reason
        self.path = path


class StorageIoError(UdigateError):
    """Underlying filesystem refused a read or write."""


class PersistenceCorrupt(UdigateError):
    """Record log has a truncated tail; refuse to serve from it."""


# --- gateway state machine -------------------------------------------------

class IllegalTransition(UdigateError):
    """Attempted record state change not in the allowed transition set."""


class LeaseRevoked(UdigateError):
    """Worker's lease no longer owns the record (expired or superseded)."""


# --- node agent ------------------------------------------------------------

class AlreadyMounted(UdigateError):
    """Same (job_id, udi digest) mounted twice on one node."""


class IdentityTimeout(UdigateError):
    """Group resolution waited beyond the configured timeout."""


# --- job / cluster ---------------------------------------------------------

class InvalidSpec(UdigateError):
    """Job description failed validation."""


class MissingGres(UdigateError):
    """Containerized job submitted without the mandatory 'udi' resource token."""


class UnknownScenario(UdigateError):
    pass


class InsufficientData(UdigateError):
    """Too few distinct node counts to fit scaling regimes."""
