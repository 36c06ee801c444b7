"""Host-device interconnect cost model.

Large transfers approach the link's peak bandwidth; small ones ride a
degraded effective-bandwidth ramp, and transfers below a driver
coalescing threshold can additionally be delayed or postponed forever.
The indefinite postponement is surfaced as the DEFERRED marker value, so
executors can turn a nondeterministic field failure into a deterministic,
reportable hang.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

from .errors import ConfigError
from .protocol import WORD_SIZE_BYTES, board_bytes

POLICY_NONE = "none"
POLICY_DELAY = "delay"
POLICY_INDEFINITE = "indefinite"
_POLICIES = (POLICY_NONE, POLICY_DELAY, POLICY_INDEFINITE)

SCOPE_SINGLE_SM = "single_sm"
SCOPE_FULL_BOARD = "full_board"


class Deferred:
    """Marker: the driver postponed this transfer indefinitely."""

    _instance = None

    def __new__(cls) -> "Deferred":
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self) -> str:
        return "DEFERRED"


DEFERRED = Deferred()


@dataclass(frozen=True)
class LinkModel:
    """Transfer cost parameters.

    The effective-bandwidth ramp is piecewise linear from ``ramp_floor``
    at zero bytes up to 1.0 at ``ramp_saturation_bytes``; beyond that the
    link delivers its peak rate.
    """

    base_latency_cycles: int = 60
    peak_bytes_per_cycle: float = 16.0
    small_transfer_threshold_bytes: int = 64
    deferral_policy: str = POLICY_INDEFINITE
    deferral_delay_cycles: int = 0
    ramp_floor: float = 0.05
    ramp_saturation_bytes: int = 64 * 1024

    def __post_init__(self) -> None:
        if self.base_latency_cycles < 0:
            raise ConfigError("base_latency_cycles must be nonnegative")
        if self.peak_bytes_per_cycle <= 0:
            raise ConfigError("peak_bytes_per_cycle must be positive")
        if self.small_transfer_threshold_bytes < 0:
            raise ConfigError("small_transfer_threshold_bytes must be nonnegative")
        if self.deferral_policy not in _POLICIES:
            raise ConfigError(f"deferral_policy must be one of {_POLICIES}")
        if self.deferral_policy == POLICY_DELAY and self.deferral_delay_cycles <= 0:
            raise ConfigError("delay policy needs a positive deferral_delay_cycles")
        if not 0.0 < self.ramp_floor <= 1.0:
            raise ConfigError("ramp_floor must be in (0, 1]")
        if self.ramp_saturation_bytes < 1:
            raise ConfigError("ramp_saturation_bytes must be positive")

    def bandwidth_fraction(self, nbytes: int) -> float:
        """Fraction of peak bandwidth delivered at this transfer size."""
        if nbytes >= self.ramp_saturation_bytes:
            return 1.0
        return self.ramp_floor + (1.0 - self.ramp_floor) * (nbytes / self.ramp_saturation_bytes)


def transfer_cycles(link: LinkModel, nbytes: int):
    """Cycles to move ``nbytes`` across the link, or DEFERRED.

    Deferral applies only strictly below the coalescing threshold; at or
    above it the driver always ships the chunk. An empty transfer has
    nothing to coalesce and pays bare latency under every policy.
    """
    if nbytes < 0:
        raise ConfigError(f"nbytes must be nonnegative, got {nbytes}")
    small = 0 < nbytes < link.small_transfer_threshold_bytes
    if small and link.deferral_policy == POLICY_INDEFINITE:
        return DEFERRED
    cycles = link.base_latency_cycles
    if nbytes > 0:
        rate = link.peak_bytes_per_cycle * link.bandwidth_fraction(nbytes)
        cycles += math.ceil(nbytes / rate)
    if small and link.deferral_policy == POLICY_DELAY:
        cycles += link.deferral_delay_cycles
    return cycles


def mailbox_sync_cost(link: LinkModel, num_sms: int, scope: str,
                      workaround_full_board: bool):
    """Cost of pushing or pulling mailbox state across the link.

    A single-cluster sync moves one word and can hit the deferral path.
    With the workaround the whole board serialization ships instead,
    padded up to the coalescing threshold when the board itself is tiny,
    so a workaround sync can never be deferred on any topology.
    """
    if scope == SCOPE_SINGLE_SM and not workaround_full_board:
        nbytes = WORD_SIZE_BYTES
    elif scope in (SCOPE_SINGLE_SM, SCOPE_FULL_BOARD):
        nbytes = board_bytes(num_sms)
        if workaround_full_board:
            nbytes = max(nbytes, link.small_transfer_threshold_bytes)
    else:
        raise ConfigError(f"unknown sync scope {scope!r}")
    return transfer_cycles(link, nbytes)
