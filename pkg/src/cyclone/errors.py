"""Exception taxonomy shared by the storage, transport and service layers."""


class CycloneError(Exception):
    """Base class for all errors raised by this package."""


# --- persistent region / NVM log ---

class OpenCorrupt(CycloneError):
    """Region header is damaged or has the wrong magic/version."""


class OpenSizeMismatch(CycloneError):
    """Backing region size does not match the requested capacity."""


class LogFull(CycloneError):
    """Ring or payload arena has no room; caller must drain or reject."""


class EntryTooLarge(CycloneError):
    """Payload exceeds the configured maximum entry size."""


class TruncateBeyondTail(CycloneError):
    pass


class TruncateBeforeHead(CycloneError):
    pass


# --- flashlog ---

class SegmentFull(CycloneError):
    """Payload does not fit in the remaining segment capacity."""


class RecoverCorrupt(CycloneError):
    """Interior damage in a log file (not a clean torn tail)."""


class RecoverInvariantViolation(CycloneError):
    """Recovered NVM/flash logs cannot be stitched into one sequence.

    Signals a harness or drain-protocol bug, never an expected runtime
    condition.
    """


class ExtendFailed(CycloneError):
    """Preallocation of zero-filled file tail failed (e.g. disk full)."""


# --- transport ---

class SendTooLarge(CycloneError):
    """Packet exceeds the configured MTU."""


class HeadroomExceeded(CycloneError):
    """Encoded header does not fit in the reserved packet headroom."""


# --- client ---

class Unavailable(CycloneError):
    """Retries exhausted without reaching a functioning leader."""


class RequestInvalid(CycloneError):
    """Request violates a static bound (key/value size, unknown op)."""
