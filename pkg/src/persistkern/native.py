"""Thread-per-worker realization of the persistent-worker pattern.

One Python thread per emulated cluster spins on its to_gpu cell and runs
the same handshake state machine as the simulator; the host dispatches by
writing a word, not by spawning a thread. Phase timings are wall-clock
nanoseconds. There is no link model here: the "link" is the host memory
system, and its latency is reported as measured.

Concurrency notes:
- Mailbox cells are single-writer/single-reader Python list slots. The
  CPython GIL makes slot loads and stores indivisible and sequentially
  consistent, which supplies the publish/observe ordering the protocol
  needs: the descriptor table entry is written strictly before the WORK
  word that names it.
- Trace steps come from a shared counter allocated *before* the cell
  write. A reader only reacts to a value after the write (and therefore
  the writer's step allocation) happened, so sorting records by step
  reproduces a valid linearization.
"""
from __future__ import annotations

import itertools
import logging
import os
import threading
import time
from dataclasses import dataclass
from typing import Optional

from . import protocol
from .device import WorkDescriptor
from .errors import (BusyTriggerError, DisposeWhileBusyError, HangDetected,
                     InitError, UsageError)
from .host import (PHASE_DISPOSE, PHASE_INIT, PHASE_LAUNCH, PHASE_TRIGGER,
                   PHASE_WAIT, PhaseTiming, _check_mask, full_mask,
                   sms_in_mask)

log = logging.getLogger(__name__)

PURE_SPIN = "pure_spin"
SPIN_THEN_YIELD = "spin_then_yield"


@dataclass(frozen=True)
class NativeConfig:
    num_workers: int = 4
    pin_to_cores: bool = False
    spin_strategy: str = SPIN_THEN_YIELD
    spin_yield_threshold: int = 10_000
    busy_loop_ns_per_iteration: float = 25.0   # rough, for timeout budgets only
    record_trace: bool = False
    wait_timeout_s: float = 10.0

    def __post_init__(self) -> None:
        if self.num_workers < 1:
            raise UsageError("num_workers must be >= 1")
        if self.spin_strategy not in (PURE_SPIN, SPIN_THEN_YIELD):
            raise UsageError(f"unknown spin strategy {self.spin_strategy!r}")
        if self.spin_strategy == SPIN_THEN_YIELD and self.spin_yield_threshold <= 0:
            raise UsageError("spin_yield_threshold must be positive")


def _busy_loop(iterations: int) -> int:
    n = 0
    while n < iterations:
        n += 1
    return n


def _maybe_pin(worker_id: int) -> None:
    if not hasattr(os, "sched_setaffinity"):
        log.warning("core pinning unsupported on this platform; running unpinned")
        return
    try:
        cores = sorted(os.sched_getaffinity(0))
        core = cores[worker_id % len(cores)]
        os.sched_setaffinity(0, {core})
    except OSError as exc:
        log.warning("core pinning failed (%s); running unpinned", exc)


class NativeSession:
    """A booted pool of persistent worker threads plus their mailboard."""

    def __init__(self, cfg: NativeConfig):
        self.cfg = cfg
        n = cfg.num_workers
        # single writer per slot: host owns to_gpu, worker i owns from_gpu[i]
        self.to_gpu: list[int] = [protocol.NOP] * n
        self.from_gpu: list[int] = [protocol.NOP] * n
        self.descriptors: dict[int, WorkDescriptor] = {}
        self.worker_phase: list[protocol.Phase] = [protocol.Phase.BOOTING] * n
        self.worker_error: list[Optional[BaseException]] = [None] * n
        self._step = itertools.count()
        self.trace: list[protocol.TraceRecord] = []
        self.pending_mask = 0
        self.pending_by_slot: dict[int, int] = {}
        self.disposed = False
        self.timings: list[PhaseTiming] = []
        self._threads: list[threading.Thread] = []

    # -- bring-up ------------------------------------------------------------

    @classmethod
    def start(cls, cfg: NativeConfig) -> tuple["NativeSession", PhaseTiming]:
        session = cls(cfg)
        t0 = time.perf_counter_ns()
        for i in range(cfg.num_workers):
            th = threading.Thread(target=session._worker_loop, args=(i,),
                                  name=f"persist-worker-{i}", daemon=True)
            session._threads.append(th)
            th.start()
        deadline = time.monotonic() + cfg.wait_timeout_s
        while not session._all_idle():
            session._check_worker_errors()
            if time.monotonic() > deadline:
                raise InitError("workers failed to reach idle")
            time.sleep(0)
        timing = PhaseTiming(PHASE_INIT, time.perf_counter_ns() - t0,
                             full_mask(cfg.num_workers))
        session.timings.append(timing)
        return session, timing

    def _all_idle(self) -> bool:
        return (all(p is protocol.Phase.IDLE for p in self.worker_phase)
                and all(w == protocol.NOP for w in self.from_gpu))

    def _check_worker_errors(self) -> None:
        for i, err in enumerate(self.worker_error):
            if err is not None:
                raise UsageError(f"worker {i} died: {err!r}") from err

    # -- worker side -----------------------------------------------------------

    def _dev_write(self, worker_id: int, word: int) -> None:
        step = next(self._step)           # allocate before the visible write
        self.from_gpu[worker_id] = word
        if self.cfg.record_trace:
            self.trace.append(protocol.TraceRecord(step, protocol.DEVICE_SIDE,
                                                   worker_id, word))

    def _host_write(self, worker_id: int, word: int) -> None:
        step = next(self._step)
        self.to_gpu[worker_id] = word
        if self.cfg.record_trace:
            self.trace.append(protocol.TraceRecord(step, protocol.HOST_SIDE,
                                                   worker_id, word))

    def _worker_loop(self, worker_id: int) -> None:
        if self.cfg.pin_to_cores:
            _maybe_pin(worker_id)
        state = protocol.WorkerState(protocol.Phase.BOOTING)
        spins = 0
        yield_at = self.cfg.spin_yield_threshold
        yielding = self.cfg.spin_strategy == SPIN_THEN_YIELD
        to_gpu = self.to_gpu
        from_gpu = self.from_gpu
        # Word the state machine last saw without making progress; the
        # cell is level-triggered, so re-stepping on the same word is a
        # no-op and the spin can stay on this cheap path.
        settled_word: Optional[int] = None
        try:
            while True:
                word = to_gpu[worker_id]
                if word == settled_word:
                    spins += 1
                    if yielding and spins >= yield_at:
                        spins = 0
                        time.sleep(0)
                    continue
                result = protocol.worker_step(state, word)
                progressed = result.state.phase is not state.phase
                state = result.state
                if result.publish is not None and result.publish != from_gpu[worker_id]:
                    self._dev_write(worker_id, result.publish)
                    progressed = True
                if self.worker_phase[worker_id] is not state.phase:
                    self.worker_phase[worker_id] = state.phase
                if isinstance(result.action, protocol.BeginWork):
                    work = self.descriptors[result.action.slot]
                    _busy_loop(work.iterations)
                    done = protocol.complete_work(state)
                    state = done.state
                    self.worker_phase[worker_id] = state.phase
                    self._dev_write(worker_id, done.publish)
                    settled_word = None
                    spins = 0
                    continue
                if isinstance(result.action, protocol.ExitLoop):
                    return
                settled_word = None if progressed else word
                spins += 1
                if yielding and spins >= yield_at:
                    spins = 0
                    time.sleep(0)
        except BaseException as exc:   # surfaced to the host on its next check
            self.worker_error[worker_id] = exc
            self.worker_phase[worker_id] = protocol.Phase.EXITED
            raise

    # -- host side -------------------------------------------------------------

    def _require_live(self) -> None:
        if self.disposed:
            raise UsageError("session already disposed")
        self._check_worker_errors()

    def trigger(self, mask: int, work: WorkDescriptor) -> PhaseTiming:
        """Dispatch: one word write per masked worker, no thread creation."""
        self._require_live()
        sm_ids = _check_mask(mask, self.cfg.num_workers)
        if self.pending_mask & mask:
            busy = sms_in_mask(self.pending_mask & mask)
            raise BusyTriggerError(f"worker(s) {busy} still busy")
        if work.slot in self.pending_by_slot:
            raise UsageError(
                f"descriptor slot {work.slot} still referenced by an un-waited dispatch")
        for i in sm_ids:
            if self.from_gpu[i] != protocol.NOP:
                raise BusyTriggerError(f"worker {i} not idle (from_gpu={self.from_gpu[i]})")
        word = protocol.encode_to_gpu(protocol.Work(work.slot))
        t0 = time.perf_counter_ns()
        self.descriptors[work.slot] = work   # in place before the word lands
        for i in sm_ids:
            self._host_write(i, word)
        elapsed = time.perf_counter_ns() - t0
        self.pending_mask |= mask
        self.pending_by_slot[work.slot] = mask
        timing = PhaseTiming(PHASE_TRIGGER, elapsed, mask)
        self.timings.append(timing)
        return timing

    def _spin_until(self, cond, what: str, sm_ids) -> int:
        """Poll until cond() holds; returns the observation timestamp (ns)."""
        deadline = time.monotonic() + self.cfg.wait_timeout_s
        spins = 0
        while True:
            if cond():
                return time.perf_counter_ns()
            self._check_worker_errors()
            if time.monotonic() > deadline:
                raise HangDetected(f"{what} made no progress within "
                                   f"{self.cfg.wait_timeout_s}s",
                                   sm_ids=tuple(sm_ids))
            spins += 1
            if self.cfg.spin_strategy == SPIN_THEN_YIELD and spins >= self.cfg.spin_yield_threshold:
                spins = 0
                time.sleep(0)

    def wait(self, mask: int) -> PhaseTiming:
        """Spin until every masked worker published FINISHED, then ack."""
        self._require_live()
        sm_ids = _check_mask(mask, self.cfg.num_workers)
        if (self.pending_mask & mask) != mask:
            raise UsageError("wait on worker(s) that were never triggered")
        t0 = time.perf_counter_ns()
        finished_at = self._spin_until(
            lambda: all(self.from_gpu[i] == protocol.FINISHED for i in sm_ids),
            "wait for FINISHED", sm_ids)
        nop = protocol.encode_to_gpu(protocol.Nop())
        for i in sm_ids:
            self._host_write(i, nop)
        self._spin_until(
            lambda: all(self.from_gpu[i] == protocol.NOP for i in sm_ids),
            "wait for ack consumption", sm_ids)
        self.pending_mask &= ~mask
        for slot in list(self.pending_by_slot):
            remaining = self.pending_by_slot[slot] & ~mask
            if remaining:
                self.pending_by_slot[slot] = remaining
            else:
                del self.pending_by_slot[slot]
        timing = PhaseTiming(PHASE_WAIT, finished_at - t0, mask)
        self.timings.append(timing)
        return timing

    def dispose(self) -> PhaseTiming:
        """Ask every worker to exit and join the threads."""
        self._require_live()
        if self.pending_mask:
            raise DisposeWhileBusyError(
                f"worker(s) {sms_in_mask(self.pending_mask)} still working")
        t0 = time.perf_counter_ns()
        exit_word = protocol.encode_to_gpu(protocol.Exit())
        for i in range(self.cfg.num_workers):
            self._host_write(i, exit_word)
        for th in self._threads:
            th.join(timeout=self.cfg.wait_timeout_s)
            if th.is_alive():
                raise HangDetected(f"worker thread {th.name} did not exit")
        self.disposed = True
        timing = PhaseTiming(PHASE_DISPOSE, time.perf_counter_ns() - t0,
                             full_mask(self.cfg.num_workers))
        self.timings.append(timing)
        return timing

    def recorded_trace(self) -> list[protocol.TraceRecord]:
        """Records sorted into their linearized order."""
        return sorted(self.trace, key=lambda r: r.step)


# -- spawn-per-task baseline ---------------------------------------------------

class ThreadSpawnBaseline:
    """The conventional flow: one fresh thread per dispatched task."""

    def __init__(self) -> None:
        self._thread: Optional[threading.Thread] = None
        self.timings: list[PhaseTiming] = []

    def launch(self, work: WorkDescriptor) -> PhaseTiming:
        if self._thread is not None:
            raise UsageError("previous task not yet joined")
        t0 = time.perf_counter_ns()
        th = threading.Thread(target=_busy_loop, args=(work.iterations,))
        th.start()
        elapsed = time.perf_counter_ns() - t0
        self._thread = th
        timing = PhaseTiming(PHASE_LAUNCH, elapsed, 1)
        self.timings.append(timing)
        return timing

    def wait(self) -> PhaseTiming:
        if self._thread is None:
            raise UsageError("no task in flight")
        t0 = time.perf_counter_ns()
        self._thread.join()
        self._thread = None
        timing = PhaseTiming(PHASE_WAIT, time.perf_counter_ns() - t0, 1)
        self.timings.append(timing)
        return timing
