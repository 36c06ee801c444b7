"""Host-side offload facades over the simulated executor.

Two session types drive the same device and link models:

- LkSession: the persistent-worker runtime. Workers are pinned at init
  and triggered through their mailboxes; dispatch cost is a mailbox sync,
  not a kernel launch.
- BaselineSession: the conventional spawn-per-kernel flow. Every launch
  pays the runtime setup cost again and leaves no state behind.

Both report per-phase timings in simulated host cycles. Trigger returns
at write visibility (the moment the mailbox word is observable device
side), and Wait spans the call to the last FINISHED observation; the
acknowledge round and worker settle happen inside Wait but after its
measured endpoint.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

from . import protocol
from .device import WorkDescriptor, check_block_mapping, work_cost
from .errors import (BusyTriggerError, DisposeWhileBusyError, InitError,
                     UsageError)
from .sim import SimEngine

PHASE_INIT = "Init"
PHASE_ALLOC = "Alloc"
PHASE_COPYIN = "Copyin"
PHASE_TRIGGER = "Trigger"
PHASE_LAUNCH = "Launch"
PHASE_WAIT = "Wait"
PHASE_COPYOUT = "Copyout"
PHASE_DISPOSE = "Dispose"

MODEL_LK = "LK"
MODEL_BASELINE = "BASE"


@dataclass(frozen=True)
class PhaseTiming:
    phase: str
    cycles: int          # simulated host cycles (nanoseconds on the native backend)
    sm_mask: int = 0

    def __post_init__(self) -> None:
        if self.cycles < 0:
            raise ValueError("cycles must be nonnegative")
        if self.phase in (PHASE_TRIGGER, PHASE_WAIT, PHASE_LAUNCH) and self.sm_mask == 0:
            raise ValueError(f"{self.phase} timing needs a nonempty sm mask")


def full_mask(num_sms: int) -> int:
    return (1 << num_sms) - 1


def mask_of(sm_ids) -> int:
    mask = 0
    for i in sm_ids:
        mask |= 1 << i
    return mask


def sms_in_mask(mask: int) -> list[int]:
    out = []
    i = 0
    while mask:
        if mask & 1:
            out.append(i)
        mask >>= 1
        i += 1
    return out


def _check_mask(mask: int, num_sms: int) -> list[int]:
    if mask <= 0:
        raise UsageError("sm mask must select at least one cluster")
    if mask >= 1 << num_sms:
        raise UsageError(f"sm mask {mask:#x} wider than {num_sms} clusters")
    return sms_in_mask(mask)


def timings_csv(rows, backend: Optional[str] = None) -> str:
    """Raw per-phase timing rows as `run_id,model,phase,sm_mask,cycles`.

    ``rows`` is an iterable of (run_id, model, PhaseTiming); a backend
    column is appended when one is named (the native executor does).
    """
    header = "run_id,model,phase,sm_mask,cycles"
    if backend is not None:
        header += ",backend"
    lines = [header]
    for run_id, model, timing in rows:
        line = f"{run_id},{model},{timing.phase},{timing.sm_mask},{timing.cycles}"
        if backend is not None:
            line += f",{backend}"
        lines.append(line)
    return "\n".join(lines) + "\n"


class LkSession:
    """Persistent-worker runtime bound to one simulated engine."""

    def __init__(self, engine: SimEngine):
        self.engine = engine
        self.cfg = engine.device.cfg
        self.pending_mask = 0
        self.pending_by_slot: dict[int, int] = {}
        self.initialized = False
        self.disposed = False
        self.timings: list[PhaseTiming] = []

    def _record(self, timing: PhaseTiming, start: int, end: int) -> PhaseTiming:
        self.timings.append(timing)
        self.engine.add_span(timing.phase, timing.sm_mask, start, end)
        return timing

    def init(self) -> PhaseTiming:
        """Pin one worker per cluster and spin them up to idle."""
        if self.initialized:
            raise UsageError("session already initialized")
        eng = self.engine
        mismatch = check_block_mapping(eng.device)
        if mismatch is not None:
            raise InitError(
                f"block {mismatch.block_id} landed on cluster {mismatch.sm_id}")
        start = eng.clock
        eng.advance(eng.cal.init_boot_cycles + eng.jitter.draw())
        eng.boot_workers()
        while not self._all_settled():
            if not eng.run_one_event():
                raise InitError("workers never settled to idle")
        words = eng.board_sync_read(range(self.cfg.num_sms))
        if any(w != protocol.NOP for w in words):
            raise InitError(f"unexpected boot board state {words}")
        self.initialized = True
        timing = PhaseTiming(PHASE_INIT, eng.clock - start, full_mask(self.cfg.num_sms))
        return self._record(timing, start, eng.clock)

    def _all_settled(self) -> bool:
        return all(sm.worker.phase is protocol.Phase.IDLE
                   and self.engine.device.mailboard[sm.sm_id].from_gpu == protocol.NOP
                   for sm in self.engine.device.sms)

    def _require_live(self) -> None:
        if not self.initialized:
            raise UsageError("session not initialized")
        if self.disposed:
            raise UsageError("session already disposed")

    def trigger(self, mask: int, work: WorkDescriptor) -> PhaseTiming:
        """Publish a work command to every masked cluster, one board sync."""
        self._require_live()
        sm_ids = _check_mask(mask, self.cfg.num_sms)
        if self.pending_mask & mask:
            busy = sms_in_mask(self.pending_mask & mask)
            raise BusyTriggerError(f"cluster(s) {busy} still busy with earlier work")
        if work.slot in self.pending_by_slot:
            raise UsageError(
                f"descriptor slot {work.slot} still referenced by an un-waited dispatch")
        eng = self.engine
        start = eng.clock
        # Descriptor must be in place before the command becomes visible,
        # and stays read-only until the dispatch is waited for.
        eng.descriptors[work.slot] = work
        word = protocol.encode_to_gpu(protocol.Work(work.slot))
        setup = (eng.cal.trigger_setup_cycles
                 + len(sm_ids) * eng.cal.mailbox_word_write_cycles)
        eng.advance(setup + eng.jitter.draw())
        eng.board_sync_write({i: word for i in sm_ids})
        self.pending_mask |= mask
        self.pending_by_slot[work.slot] = mask
        timing = PhaseTiming(PHASE_TRIGGER, eng.clock - start, mask)
        return self._record(timing, start, eng.clock)

    def wait(self, mask: int) -> PhaseTiming:
        """Block until every masked cluster has published FINISHED.

        The reported cycles span the call to the last FINISHED observation.
        The acknowledge write and the workers' return to idle happen before
        this returns, but outside the measured span.
        """
        self._require_live()
        sm_ids = _check_mask(mask, self.cfg.num_sms)
        if (self.pending_mask & mask) != mask:
            idle = sms_in_mask(mask & ~self.pending_mask)
            raise UsageError(f"cluster(s) {idle} were never triggered")
        eng = self.engine
        start = eng.clock
        eng.advance(eng.jitter.draw())
        while True:
            words = eng.board_sync_read(sm_ids)
            if all(w == protocol.FINISHED for w in words):
                finished_at = eng.clock
                break
        nop = protocol.encode_to_gpu(protocol.Nop())
        eng.board_sync_write({i: nop for i in sm_ids})
        eng.advance(eng.cal.poll_interval_cycles)   # workers consume the ack
        for i in sm_ids:
            assert eng.device.sms[i].worker.phase is protocol.Phase.IDLE
        self.pending_mask &= ~mask
        for slot in list(self.pending_by_slot):
            remaining = self.pending_by_slot[slot] & ~mask
            if remaining:
                self.pending_by_slot[slot] = remaining
            else:
                del self.pending_by_slot[slot]
        timing = PhaseTiming(PHASE_WAIT, finished_at - start, mask)
        return self._record(timing, start, finished_at)

    def copyin(self, nbytes: int) -> PhaseTiming:
        return self._copy(PHASE_COPYIN, nbytes)

    def copyout(self, nbytes: int) -> PhaseTiming:
        return self._copy(PHASE_COPYOUT, nbytes)

    def _copy(self, phase: str, nbytes: int) -> PhaseTiming:
        self._require_live()
        eng = self.engine
        start = eng.clock
        eng.advance(eng.jitter.draw())
        eng.payload_transfer(nbytes, what=phase.lower())
        timing = PhaseTiming(phase, eng.clock - start)
        return self._record(timing, start, eng.clock)

    def dispose(self) -> PhaseTiming:
        """Send EXIT to every worker and tear the runtime down."""
        self._require_live()
        if self.pending_mask:
            busy = sms_in_mask(self.pending_mask)
            raise DisposeWhileBusyError(f"cluster(s) {busy} still working")
        eng = self.engine
        start = eng.clock
        eng.advance(eng.cal.lk_teardown_cycles + eng.jitter.draw())
        exit_word = protocol.encode_to_gpu(protocol.Exit())
        eng.board_sync_write({i: exit_word for i in range(self.cfg.num_sms)})
        while not all(sm.worker.phase is protocol.Phase.EXITED
                      for sm in eng.device.sms):
            if not eng.run_one_event():
                raise UsageError("workers never exited")
        self.disposed = True
        timing = PhaseTiming(PHASE_DISPOSE, eng.clock - start, full_mask(self.cfg.num_sms))
        return self._record(timing, start, eng.clock)


class BaselineSession:
    """Spawn-per-kernel flow: launch overhead paid on every dispatch."""

    def __init__(self, engine: SimEngine):
        self.engine = engine
        self.cfg = engine.device.cfg
        self.allocated = False
        self.kernel_done: Optional[int] = None
        self.timings: list[PhaseTiming] = []

    def _record(self, timing: PhaseTiming, start: int, end: int) -> PhaseTiming:
        self.timings.append(timing)
        self.engine.add_span(timing.phase, timing.sm_mask, start, end)
        return timing

    def alloc(self) -> PhaseTiming:
        if self.allocated:
            raise UsageError("already allocated")
        eng = self.engine
        start = eng.clock
        eng.advance(eng.cal.alloc_setup_cycles + eng.jitter.draw())
        self.allocated = True
        timing = PhaseTiming(PHASE_ALLOC, eng.clock - start)
        return self._record(timing, start, eng.clock)

    def launch(self, mask: int, work: WorkDescriptor) -> PhaseTiming:
        if not self.allocated:
            raise UsageError("launch before alloc")
        if self.kernel_done is not None:
            raise UsageError("previous kernel not yet waited for")
        _check_mask(mask, self.cfg.num_sms)
        eng = self.engine
        start = eng.clock
        eng.advance(eng.cal.launch_setup_cycles + eng.jitter.draw())
        eng.payload_transfer(eng.cal.launch_packet_bytes, what="kernel launch")
        # Kernel begins once the launch packet lands; all blocks of one
        # launch run the same uniform load, so one retire time covers the mask.
        self.kernel_done = eng.clock + work_cost(self.cfg, work)
        timing = PhaseTiming(PHASE_LAUNCH, eng.clock - start, mask)
        return self._record(timing, start, eng.clock)

    def wait(self, mask: int) -> PhaseTiming:
        if self.kernel_done is None:
            raise UsageError("no kernel in flight")
        eng = self.engine
        start = eng.clock
        eng.advance(eng.jitter.draw())
        while True:
            eng.payload_transfer(eng.cal.completion_poll_bytes, what="completion poll")
            if eng.clock >= self.kernel_done:
                break
        self.kernel_done = None
        timing = PhaseTiming(PHASE_WAIT, eng.clock - start, mask)
        return self._record(timing, start, eng.clock)

    def copyin(self, nbytes: int) -> PhaseTiming:
        return self._copy(PHASE_COPYIN, nbytes)

    def copyout(self, nbytes: int) -> PhaseTiming:
        return self._copy(PHASE_COPYOUT, nbytes)

    def _copy(self, phase: str, nbytes: int) -> PhaseTiming:
        eng = self.engine
        start = eng.clock
        eng.advance(eng.jitter.draw())
        eng.payload_transfer(nbytes, what=phase.lower())
        timing = PhaseTiming(phase, eng.clock - start)
        return self._record(timing, start, eng.clock)

    def dispose(self) -> PhaseTiming:
        if self.kernel_done is not None:
            raise DisposeWhileBusyError("kernel still in flight")
        eng = self.engine
        start = eng.clock
        eng.advance(eng.cal.baseline_teardown_cycles + eng.jitter.draw())
        self.allocated = False
        timing = PhaseTiming(PHASE_DISPOSE, eng.clock - start)
        return self._record(timing, start, eng.clock)
