"""Shared exception types for the persistkern package."""
from __future__ import annotations


class PersistkernError(Exception):
    """Base class for all persistkern errors."""


class ProtocolViolation(PersistkernError):
    """An illegal mailbox word or handshake transition was observed.

    Carries enough context (raw word, state, trace index) to name the
    first offending write, since the runtime fails fast rather than
    ignoring malformed traffic.
    """

    def __init__(self, message: str, *, word: int | None = None, index: int | None = None):
        super().__init__(message)
        self.word = word
        self.index = index


class ConfigError(PersistkernError):
    """A configuration object violates one of its invariants."""


class UnsupportedWorkloadError(PersistkernError):
    """A work descriptor names a workload kind the cost model cannot price."""


class BusyTriggerError(PersistkernError):
    """Work was dispatched to a worker that has not completed its previous work."""


class DisposeWhileBusyError(PersistkernError):
    """Teardown was requested while at least one worker is still working."""


class InitError(PersistkernError):
    """Runtime bring-up failed (e.g. block-to-cluster mapping mismatch)."""


class HangDetected(PersistkernError):
    """A host-device transfer made no progress within the hang budget.

    Raised instead of actually waiting forever so the pathology is a
    deterministic, testable outcome.
    """

    def __init__(self, message: str, *, sm_ids: tuple[int, ...] = (), nbytes: int = 0,
                 at_cycle: int = 0):
        super().__init__(message)
        self.sm_ids = sm_ids
        self.nbytes = nbytes
        self.at_cycle = at_cycle


class UsageError(PersistkernError):
    """An API call violated its stated precondition (host-side misuse)."""
