"""Clustered accelerator model: lockstep clusters, cost model, block pinning.

The device is an array of identical clusters (SMs). One persistent worker
block is pinned to each cluster; the block-to-cluster assignment is
expected to be the identity and is checkable. Compute cost is linear in
the workload's iteration count with a single calibration constant, and a
uniform busy loop retires all lanes of a warp on the same cycle.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

from . import protocol
from .errors import ConfigError, UnsupportedWorkloadError

BUSY_LOOP = "busy_loop"


@dataclass(frozen=True)
class DeviceConfig:
    num_sms: int = 16
    threads_per_sm: int = 128
    warp_width: int = 32
    cycles_per_iteration: float = 1.0
    clock_hz: int = 1_000_000_000   # reporting only, never enters cost math

    def __post_init__(self) -> None:
        if self.num_sms < 1:
            raise ConfigError(f"num_sms must be >= 1, got {self.num_sms}")
        if self.threads_per_sm < 1 or self.warp_width < 1:
            raise ConfigError("threads_per_sm and warp_width must be positive")
        if self.threads_per_sm % self.warp_width != 0:
            raise ConfigError(
                f"warp_width {self.warp_width} does not divide "
                f"threads_per_sm {self.threads_per_sm}")
        if self.cycles_per_iteration <= 0:
            raise ConfigError("cycles_per_iteration must be positive")
        if self.clock_hz < 1:
            raise ConfigError("clock_hz must be positive")

    @property
    def warps_per_sm(self) -> int:
        return self.threads_per_sm // self.warp_width


@dataclass(frozen=True)
class WorkDescriptor:
    """One offloadable unit: a slot-indexed descriptor the host publishes."""

    slot: int
    iterations: int
    kind: str = BUSY_LOOP
    data_in_ref: Optional[object] = None
    data_out_ref: Optional[object] = None

    def __post_init__(self) -> None:
        if self.slot < 0:
            raise ConfigError(f"slot must be nonnegative, got {self.slot}")
        if self.iterations < 0:
            raise ConfigError(f"iterations must be nonnegative, got {self.iterations}")
        if self.kind == BUSY_LOOP and (self.data_in_ref is not None
                                       or self.data_out_ref is not None):
            # The busy loop is pure compute; data references would go unread.
            raise ConfigError("busy_loop work must not carry data references")


@dataclass
class SmState:
    sm_id: int
    worker: protocol.WorkerState = field(
        default_factory=lambda: protocol.WorkerState(protocol.Phase.BOOTING))
    busy_until: Optional[int] = None   # cycle the current work retires, if working


@dataclass
class Device:
    cfg: DeviceConfig
    sms: list[SmState]
    mailboard: protocol.Mailboard
    # Identity unless a test swaps entries to exercise the mapping check.
    block_to_sm: list[int]


def build_device(cfg: DeviceConfig) -> Device:
    """One booting worker block per cluster, one mailbox pair each."""
    return Device(
        cfg=cfg,
        sms=[SmState(sm_id=i) for i in range(cfg.num_sms)],
        mailboard=protocol.Mailboard.create(cfg.num_sms),
        block_to_sm=list(range(cfg.num_sms)),
    )


@dataclass(frozen=True)
class MappingMismatch:
    block_id: int
    sm_id: int


def check_block_mapping(device: Device) -> Optional[MappingMismatch]:
    """Verify every block landed on the cluster with its own id.

    Returns the first mismatch, or None when the assignment is the
    identity (the expected round-robin outcome).
    """
    for block_id, sm_id in enumerate(device.block_to_sm):
        if block_id != sm_id:
            return MappingMismatch(block_id=block_id, sm_id=sm_id)
    return None


def work_cost(cfg: DeviceConfig, work: WorkDescriptor) -> int:
    """Cycles a cluster spends on the given work item."""
    if work.kind != BUSY_LOOP:
        raise UnsupportedWorkloadError(f"unknown workload kind {work.kind!r}")
    return math.ceil(work.iterations * cfg.cycles_per_iteration)


def lane_costs(cfg: DeviceConfig, work: WorkDescriptor) -> list[int]:
    """Per-lane retire cycles for one warp; uniform work keeps them equal.

    Warp completion is the max over its lanes, so for the busy loop every
    warp of the cluster retires at work_cost exactly.
    """
    cost = work_cost(cfg, work)
    return [cost] * cfg.warp_width


def warp_completion(cfg: DeviceConfig, work: WorkDescriptor) -> int:
    return max(lane_costs(cfg, work))
