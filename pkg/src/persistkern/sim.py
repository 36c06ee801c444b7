"""Deterministic cycle-level executor.

A single event heap interleaves link transfer completions and per-cluster
worker polls on a virtual clock. Everything is a pure function of the
configuration and the jitter seed: event ties break by (link, cluster
ascending, host) and then insertion order, so two runs with the same
inputs produce byte-identical traces.

Workers poll their to_gpu cell on a fixed grid (every poll_interval
cycles). A worker whose poll makes no observable progress parks instead
of rescheduling; the next host write to its cell re-arms the poll at the
next grid point, which is indistinguishable from having spun the whole
time. Working clusters hold no poll events at all until their completion
event fires.
"""
from __future__ import annotations

import dataclasses
import heapq
import random
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

from . import protocol
from .calibration import Calibration, DEFAULT_CALIBRATION
from .device import Device, WorkDescriptor, work_cost
from .errors import HangDetected, UsageError
from .link import (DEFERRED, SCOPE_FULL_BOARD, SCOPE_SINGLE_SM, LinkModel,
                   mailbox_sync_cost, transfer_cycles)

_RANK_LINK = 0
_RANK_SM = 1
_RANK_HOST = 2


@dataclass(frozen=True)
class JitterModel:
    """Bounded nonnegative additive noise, drawn once per host phase op.

    The distribution is a mixture: with probability ``spike_prob`` a
    uniform draw from [spike_lo, spike_hi], otherwise a uniform draw from
    [0, base_range]. The same seed always yields the same draw sequence.
    """

    seed: int = 0
    base_range: int = 0
    spike_prob: float = 0.0
    spike_lo: int = 0
    spike_hi: int = 0

    def __post_init__(self) -> None:
        if self.base_range < 0 or self.spike_lo < 0:
            raise UsageError("jitter noise must be nonnegative")
        if not 0.0 <= self.spike_prob <= 1.0:
            raise UsageError("spike_prob must be a probability")
        if self.spike_prob > 0.0 and self.spike_hi < self.spike_lo:
            raise UsageError("spike range is inverted")

    @property
    def enabled(self) -> bool:
        return self.base_range > 0 or self.spike_prob > 0.0

    @property
    def max_noise(self) -> int:
        return max(self.base_range, self.spike_hi if self.spike_prob > 0 else 0)

    def sampler(self) -> "JitterSampler":
        return JitterSampler(self)


class JitterSampler:
    def __init__(self, model: JitterModel):
        self.model = model
        self._rng = random.Random(model.seed)

    def draw(self) -> int:
        m = self.model
        if not m.enabled:
            return 0
        if m.spike_prob > 0.0 and self._rng.random() < m.spike_prob:
            return self._rng.randint(m.spike_lo, m.spike_hi)
        return self._rng.randint(0, m.base_range)


@dataclass(frozen=True)
class PhaseSpan:
    phase: str
    sm_mask: int
    start_cycle: int
    end_cycle: int

    def to_csv_row(self) -> str:
        return f"{self.phase},{self.sm_mask},{self.start_cycle},{self.end_cycle}"


@dataclass
class SimTrace:
    """Everything observable from one simulated run."""

    records: list[protocol.TraceRecord]
    spans: list[PhaseSpan]
    final_clock: int
    worker_phases: list[str]

    def writes(self) -> list[tuple[str, int, int]]:
        return [(r.side, r.sm_id, r.word) for r in self.records]

    def trace_text(self) -> str:
        return protocol.format_trace(self.records)

    def timings_csv(self) -> str:
        lines = ["phase,sm_mask,start_cycle,end_cycle"]
        lines += [s.to_csv_row() for s in self.spans]
        return "\n".join(lines) + "\n"


class SimEngine:
    """Owns the clock, the event heap, and the device under simulation."""

    def __init__(self, device: Device, link: LinkModel,
                 cal: Calibration = DEFAULT_CALIBRATION,
                 jitter: Optional[JitterModel] = None,
                 workaround_full_board: bool = True):
        self.device = device
        self.link = link
        self.cal = cal
        self.jitter = (jitter or JitterModel()).sampler()
        self.workaround_full_board = workaround_full_board
        self.clock = 0
        self._heap: list[tuple[int, int, int, int, Callable[[], None]]] = []
        self._seq = 0
        self._step = 0
        self.records: list[protocol.TraceRecord] = []
        self.spans: list[PhaseSpan] = []
        self.descriptors: dict[int, WorkDescriptor] = {}
        n = device.cfg.num_sms
        self._next_poll: list[Optional[int]] = [None] * n
        self._poll_anchor = 0
        self._booted = False

    # -- event plumbing ----------------------------------------------------

    def _push(self, due: int, rank: int, sub: int, fn: Callable[[], None]) -> None:
        self._seq += 1
        heapq.heappush(self._heap, (due, rank, sub, self._seq, fn))

    def run_events_until(self, target: int) -> None:
        while self._heap and self._heap[0][0] <= target:
            due, _rank, _sub, _seq, fn = heapq.heappop(self._heap)
            if due > self.clock:
                self.clock = due
            fn()

    def advance(self, cycles: int) -> None:
        """Host spends ``cycles``; device events due in the window fire."""
        target = self.clock + cycles
        self.run_events_until(target)
        self.clock = target

    def run_one_event(self) -> bool:
        """Pop and run the next event, if any; used for settle loops."""
        if not self._heap:
            return False
        due, _rank, _sub, _seq, fn = heapq.heappop(self._heap)
        if due > self.clock:
            self.clock = due
        fn()
        return True

    def drain_events(self) -> None:
        while self._heap:
            due, _rank, _sub, _seq, fn = heapq.heappop(self._heap)
            if due > self.clock:
                self.clock = due
            fn()

    def record(self, side: str, sm_id: int, word: int) -> None:
        self.records.append(protocol.TraceRecord(self._step, side, sm_id, word))
        self._step += 1

    def add_span(self, phase: str, sm_mask: int, start: int, end: int) -> None:
        self.spans.append(PhaseSpan(phase, sm_mask, start, end))

    def snapshot(self) -> SimTrace:
        return SimTrace(
            records=list(self.records),
            spans=list(self.spans),
            final_clock=self.clock,
            worker_phases=[sm.worker.phase.value for sm in self.device.sms],
        )

    # -- worker scheduling -------------------------------------------------

    def _next_grid(self, at: int) -> int:
        """Smallest poll-grid cycle >= at."""
        interval = self.cal.poll_interval_cycles
        offset = at - self._poll_anchor
        if offset <= 0:
            return self._poll_anchor
        return self._poll_anchor + -(-offset // interval) * interval

    def boot_workers(self) -> None:
        """Arm the first poll of every cluster at the current cycle."""
        if self._booted:
            raise UsageError("workers already booted")
        self._booted = True
        self._poll_anchor = self.clock
        for i in range(self.device.cfg.num_sms):
            self._arm_poll(i, self.clock)

    def _arm_poll(self, sm_id: int, at: int) -> None:
        # Polls all live on one grid, so an armed poll already covers any
        # later wake request for the same cluster.
        if self._next_poll[sm_id] is not None:
            return
        self._next_poll[sm_id] = at
        self._push(at, _RANK_SM, sm_id, lambda: self.worker_poll_step(sm_id))

    def _wake(self, sm_id: int) -> None:
        if self._booted:
            self._arm_poll(sm_id, self._next_grid(self.clock))

    def worker_poll_step(self, sm_id: int) -> None:
        """One spin of the persistent worker loop on cluster ``sm_id``."""
        self._next_poll[sm_id] = None
        sm = self.device.sms[sm_id]
        if sm.worker.phase is protocol.Phase.EXITED:
            return
        pair = self.device.mailboard[sm_id]
        before = sm.worker
        result = protocol.worker_step(before, pair.to_gpu)
        sm.worker = result.state
        changed = False
        if result.publish is not None and result.publish != pair.from_gpu:
            pair.from_gpu = result.publish
            self.record(protocol.DEVICE_SIDE, sm_id, result.publish)
            changed = True
        if isinstance(result.action, protocol.BeginWork):
            work = self.descriptors.get(result.action.slot)
            if work is None:
                raise UsageError(f"no descriptor registered for slot {result.action.slot}")
            cost = work_cost(self.device.cfg, work)
            sm.busy_until = self.clock + cost
            self._push(self.clock + cost, _RANK_SM, sm_id,
                       lambda: self._complete(sm_id))
            return
        if isinstance(result.action, protocol.ExitLoop):
            return
        if changed or result.state.phase is not before.phase:
            self._arm_poll(sm_id, self.clock + self.cal.poll_interval_cycles)
        # else: steady spin, park until a host write wakes us

    def _complete(self, sm_id: int) -> None:
        sm = self.device.sms[sm_id]
        result = protocol.complete_work(sm.worker)
        sm.worker = result.state
        sm.busy_until = None
        pair = self.device.mailboard[sm_id]
        if result.publish is not None and result.publish != pair.from_gpu:
            pair.from_gpu = result.publish
            self.record(protocol.DEVICE_SIDE, sm_id, result.publish)
        # resume polling for the acknowledge
        self._arm_poll(sm_id, self._next_grid(self.clock + 1))

    # -- link operations ---------------------------------------------------

    def _sync_cost(self, sm_ids: Sequence[int]):
        scope = SCOPE_SINGLE_SM if len(sm_ids) == 1 else SCOPE_FULL_BOARD
        return mailbox_sync_cost(self.link, self.device.cfg.num_sms, scope,
                                 self.workaround_full_board)

    def _hang(self, what: str, sm_ids: Sequence[int], nbytes: int) -> None:
        self.advance(self.cal.hang_budget_cycles)
        raise HangDetected(
            f"{what} for cluster(s) {list(sm_ids)} deferred by the driver; "
            f"no progress within {self.cal.hang_budget_cycles} cycles",
            sm_ids=tuple(sm_ids), nbytes=nbytes, at_cycle=self.clock)

    def board_sync_write(self, changes: dict[int, int]) -> None:
        """Publish host-side to_gpu values; returns once visible device-side."""
        sm_ids = sorted(changes)
        cost = self._sync_cost(sm_ids)
        if cost is DEFERRED:
            self._hang("mailbox write", sm_ids, protocol.WORD_SIZE_BYTES)

        def apply() -> None:
            for i in sm_ids:
                pair = self.device.mailboard[i]
                if pair.to_gpu != changes[i]:
                    pair.to_gpu = changes[i]
                    self.record(protocol.HOST_SIDE, i, changes[i])
                    self._wake(i)

        self._push(self.clock + cost, _RANK_LINK, 0, apply)
        self.advance(cost)

    def board_sync_read(self, sm_ids: Sequence[int]) -> list[int]:
        """Pull from_gpu words for the given clusters; costs one transfer."""
        cost = self._sync_cost(sm_ids)
        if cost is DEFERRED:
            self._hang("mailbox read", sm_ids, protocol.WORD_SIZE_BYTES)
        self.advance(cost)
        return [self.device.mailboard[i].from_gpu for i in sm_ids]

    def payload_transfer(self, nbytes: int, what: str = "payload transfer") -> None:
        cost = transfer_cycles(self.link, nbytes)
        if cost is DEFERRED:
            self._hang(what, (), nbytes)
        self.advance(cost)


def run_until_quiescent(device: Device, link: LinkModel,
                        host_program: Sequence[tuple],
                        jitter: Optional[JitterModel] = None,
                        hang_budget_cycles: Optional[int] = None,
                        cal: Calibration = DEFAULT_CALIBRATION,
                        workaround_full_board: bool = True) -> SimTrace:
    """Interpret a finite host script and run the device to quiescence.

    Script ops, as tuples:
        ("init",)                       bring up the persistent workers
        ("copyin", nbytes) / ("copyout", nbytes)
        ("trigger", sm_mask, WorkDescriptor)
        ("wait", sm_mask)
        ("dispose",)

    Raises HangDetected when a deferred transfer stalls the run, and
    propagates protocol violations from the device.
    """
    from . import host  # deferred: host builds on this module

    if hang_budget_cycles is not None:
        cal = dataclasses.replace(cal, hang_budget_cycles=hang_budget_cycles)
    engine = SimEngine(device, link, cal=cal, jitter=jitter,
                       workaround_full_board=workaround_full_board)
    session: Optional[host.LkSession] = None
    for op in host_program:
        name = op[0]
        if name == "init":
            session = host.LkSession(engine)
            session.init()
        elif session is None:
            raise UsageError(f"{name!r} before init")
        elif name == "trigger":
            session.trigger(op[1], op[2])
        elif name == "wait":
            session.wait(op[1])
        elif name == "copyin":
            session.copyin(op[1])
        elif name == "copyout":
            session.copyout(op[1])
        elif name == "dispose":
            session.dispose()
        else:
            raise UsageError(f"unknown host op {name!r}")
    engine.drain_events()
    return engine.snapshot()
