"""Dual-mailbox wire format and the persistent-worker handshake.

Each worker (one per cluster) owns a pair of word-sized cells:

- ``to_gpu``   written by the host only, read by the worker,
- ``from_gpu`` written by the worker only, read by the host.

Values carried by the cells:

    from_gpu:  0 INIT, 1 FINISHED, 2 WORKING, 4 NOP
    to_gpu:    4 NOP, 8 EXIT, 16+slot WORK

Design notes:
- Cells are level-triggered, not edge-triggered: a command stays in the
  cell until overwritten, so a busy worker re-reading its own WORK word
  is the normal spin case, not a re-dispatch.
- The host acknowledges FINISHED by rewriting NOP into ``to_gpu``; the
  worker returns to idle and republishes NOP. This keeps exactly one
  writer per cell in each direction.
- Everything here is pure state-machine logic. Executors own the memory
  cells, the scheduling, and the visibility guarantees.
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Iterable, Optional, Sequence, Union

from .errors import ProtocolViolation

WORD_BITS = 32
WORD_MAX = 2**WORD_BITS - 1
WORD_SIZE_BYTES = 4

# from_gpu statuses
INIT = 0
FINISHED = 1
WORKING = 2
NOP = 4          # idle sentinel, same value in both directions
# to_gpu statuses
EXIT = 8
WORK_BASE = 16   # WORK command for slot s is encoded as WORK_BASE + s

FROM_GPU_WORDS = frozenset({INIT, FINISHED, WORKING, NOP})
MAX_SLOT = WORD_MAX - WORK_BASE


# --------------------------------------------------------------------------
# Host commands (the to_gpu direction)

@dataclass(frozen=True)
class Nop:
    """No work: the idle/acknowledge command."""


@dataclass(frozen=True)
class Exit:
    """Ask the worker to leave its spin loop permanently."""


@dataclass(frozen=True)
class Work:
    """Dispatch the descriptor stored in the given work slot."""

    slot: int


HostCommand = Union[Nop, Exit, Work]


def encode_to_gpu(cmd: HostCommand) -> int:
    """Encode a host command into a to_gpu status word."""
    if isinstance(cmd, Nop):
        return NOP
    if isinstance(cmd, Exit):
        return EXIT
    if isinstance(cmd, Work):
        if cmd.slot < 0 or cmd.slot > MAX_SLOT:
            raise ProtocolViolation(
                f"work slot {cmd.slot} does not fit in a {WORD_BITS}-bit word",
                word=None)
        return WORK_BASE + cmd.slot
    raise TypeError(f"not a host command: {cmd!r}")


def decode_to_gpu(word: int) -> HostCommand:
    """Decode a to_gpu status word, failing fast on illegal values."""
    if word == NOP:
        return Nop()
    if word == EXIT:
        return Exit()
    if WORK_BASE <= word <= WORD_MAX:
        return Work(word - WORK_BASE)
    raise ProtocolViolation(f"illegal to_gpu word {word}", word=word)


def is_work_word(word: int) -> bool:
    return WORK_BASE <= word <= WORD_MAX


# --------------------------------------------------------------------------
# Worker state machine

class Phase(Enum):
    BOOTING = "booting"
    IDLE = "idle"
    WORKING = "working"
    FINISHED_PENDING_ACK = "finished_pending_ack"
    EXITED = "exited"


@dataclass(frozen=True)
class WorkerState:
    """Protocol-visible state of one persistent worker.

    ``slot`` is present exactly while the worker is working or waiting
    for its FINISHED to be acknowledged.
    """

    phase: Phase = Phase.BOOTING
    slot: Optional[int] = None

    def __post_init__(self) -> None:
        busy = self.phase in (Phase.WORKING, Phase.FINISHED_PENDING_ACK)
        if busy and self.slot is None:
            raise ValueError(f"{self.phase} requires a current slot")
        if not busy and self.slot is not None:
            raise ValueError(f"{self.phase} must not carry a slot")


@dataclass(frozen=True)
class BeginWork:
    slot: int


@dataclass(frozen=True)
class ExitLoop:
    pass


Action = Union[BeginWork, ExitLoop, None]


@dataclass(frozen=True)
class StepResult:
    state: WorkerState
    publish: Optional[int]   # from_gpu word to write, None = write nothing
    action: Action


def worker_step(state: WorkerState, observed: int) -> StepResult:
    """One poll of the worker loop: read to_gpu, decide, publish from_gpu.

    The WORKING -> FINISHED transition is not taken here; work completion
    is signalled by the executor through :func:`complete_work`.

    Raises ProtocolViolation on an illegal observed word, on any step
    from an exited worker, and on a work command naming a different slot
    while the worker is still busy with (or awaiting the ack for) the
    previous one.
    """
    if state.phase is Phase.EXITED:
        raise ProtocolViolation("worker stepped after exit")
    cmd = decode_to_gpu(observed)

    # Exit wins in every non-working phase, including boot.
    if isinstance(cmd, Exit) and state.phase is not Phase.WORKING:
        return StepResult(WorkerState(Phase.EXITED), None, ExitLoop())

    if state.phase is Phase.BOOTING:
        # Announce INIT once, then idle. A pending command stays in the
        # cell and is consumed on the next poll.
        return StepResult(WorkerState(Phase.IDLE), INIT, None)

    if state.phase is Phase.IDLE:
        if isinstance(cmd, Nop):
            return StepResult(state, NOP, None)
        assert isinstance(cmd, Work)
        return StepResult(WorkerState(Phase.WORKING, cmd.slot), WORKING,
                          BeginWork(cmd.slot))

    if state.phase is Phase.WORKING:
        if isinstance(cmd, Work) and cmd.slot != state.slot:
            raise ProtocolViolation(
                f"work slot {cmd.slot} triggered while busy with slot {state.slot}",
                word=observed)
        # Stale own command, a premature NOP, or EXIT: keep working.
        return StepResult(state, WORKING, None)

    assert state.phase is Phase.FINISHED_PENDING_ACK
    if isinstance(cmd, Nop):
        return StepResult(WorkerState(Phase.IDLE), NOP, None)
    assert isinstance(cmd, Work)
    if cmd.slot != state.slot:
        raise ProtocolViolation(
            f"work slot {cmd.slot} triggered before slot {state.slot} was acknowledged",
            word=observed)
    return StepResult(state, FINISHED, None)  # stale own command


def complete_work(state: WorkerState) -> StepResult:
    """Executor-signalled completion of the current work item."""
    if state.phase is not Phase.WORKING:
        raise ProtocolViolation(f"completion signalled in phase {state.phase}")
    return StepResult(WorkerState(Phase.FINISHED_PENDING_ACK, state.slot),
                      FINISHED, None)


# --------------------------------------------------------------------------
# Mailboxes

@dataclass
class MailboxPair:
    """One worker's pair of cells. Host writes to_gpu, worker writes from_gpu."""

    sm_id: int
    to_gpu: int = NOP
    from_gpu: int = NOP   # idle sentinel until the worker announces INIT


@dataclass
class Mailboard:
    """All mailbox pairs of a device, index i serving cluster i."""

    entries: list[MailboxPair]

    @classmethod
    def create(cls, num_sms: int) -> "Mailboard":
        return cls([MailboxPair(sm_id=i) for i in range(num_sms)])

    def __len__(self) -> int:
        return len(self.entries)

    def __getitem__(self, sm_id: int) -> MailboxPair:
        return self.entries[sm_id]

    def serialized_bytes(self) -> int:
        """Wire size of the board: two words per cluster."""
        return 2 * len(self.entries) * WORD_SIZE_BYTES


def board_bytes(num_sms: int) -> int:
    return 2 * num_sms * WORD_SIZE_BYTES


# --------------------------------------------------------------------------
# Trace validation

HOST_SIDE = "H"
DEVICE_SIDE = "D"


@dataclass(frozen=True)
class TraceRecord:
    step: int
    side: str      # HOST_SIDE or DEVICE_SIDE
    sm_id: int
    word: int

    def to_line(self) -> str:
        return f"{self.step},{self.side},{self.sm_id},{self.word}"


@dataclass(frozen=True)
class Violation:
    index: int
    reason: str

    def __str__(self) -> str:
        return f"violation at index {self.index}: {self.reason}"


@dataclass
class _SmReplay:
    # phase None = not yet resolved: becomes BOOTING if the first device
    # write is INIT, otherwise the trace is assumed to start post-boot.
    phase: Optional[Phase] = None
    slot: Optional[int] = None
    to_gpu: int = NOP
    from_gpu: int = NOP
    work_pending: bool = False   # host wrote WORK, worker has not begun it
    exited: bool = False
    work_writes: int = 0
    begins: int = 0


@dataclass
class ReplayState:
    """Outcome of replaying a trace: per-SM counters for property checks."""

    sms: dict[int, _SmReplay]

    def dispatch_counts(self) -> dict[int, tuple[int, int]]:
        """Per SM: (host work writes, observed begin_work transitions)."""
        return {i: (s.work_writes, s.begins) for i, s in self.sms.items()}


def _host_write(sm: _SmReplay, word: int, index: int) -> Optional[Violation]:
    if sm.exited or sm.to_gpu == EXIT:
        return Violation(index, "host write after exit")
    if word == NOP:
        if sm.from_gpu != FINISHED:
            return Violation(index, f"ack written while from_gpu={sm.from_gpu}, not FINISHED")
        sm.to_gpu = NOP
        return None
    if word == EXIT:
        if sm.from_gpu == WORKING:
            return Violation(index, "exit written to a working cluster")
        if sm.work_pending:
            return Violation(index, "exit would discard an undelivered work command")
        sm.to_gpu = EXIT
        return None
    if is_work_word(word):
        if is_work_word(sm.to_gpu):
            return Violation(index, "trigger while busy: previous work command not consumed")
        if sm.to_gpu == EXIT:
            return Violation(index, "work written after exit")
        if sm.from_gpu not in (FINISHED, NOP):
            return Violation(index, f"work written while from_gpu={sm.from_gpu}")
        sm.to_gpu = word
        sm.work_pending = True
        sm.work_writes += 1
        return None
    return Violation(index, f"illegal to_gpu word {word}")


def _device_write(sm: _SmReplay, word: int, index: int) -> Optional[Violation]:
    if sm.exited:
        return Violation(index, "device write after exit")
    if word not in FROM_GPU_WORDS:
        return Violation(index, f"illegal from_gpu word {word}")

    if sm.phase is None:
        if word == INIT:
            # Boot announcement: worker was booting, is now idle.
            sm.phase = Phase.IDLE
            sm.from_gpu = INIT
            return None
        # No boot prefix: trace starts with an already-idle worker.
        sm.phase = Phase.IDLE
        sm.from_gpu = NOP

    if sm.phase is Phase.IDLE:
        if word == NOP and sm.from_gpu == INIT:
            sm.from_gpu = NOP   # post-boot NOP
            return None
        if word == WORKING and is_work_word(sm.to_gpu) and sm.work_pending:
            sm.phase = Phase.WORKING
            sm.slot = sm.to_gpu - WORK_BASE
            sm.from_gpu = WORKING
            sm.work_pending = False
            sm.begins += 1
            return None
        return Violation(index, f"word {word} not producible by an idle worker")

    if sm.phase is Phase.WORKING:
        if word == FINISHED:
            sm.phase = Phase.FINISHED_PENDING_ACK
            sm.from_gpu = FINISHED
            return None
        return Violation(index, f"word {word} not producible by a working worker")

    assert sm.phase is Phase.FINISHED_PENDING_ACK
    if word == NOP and sm.to_gpu == NOP:
        sm.phase = Phase.IDLE
        sm.slot = None
        sm.from_gpu = NOP
        return None
    return Violation(index, f"word {word} not producible while awaiting ack")


def replay_trace(trace: Iterable[tuple[str, int, int]]) -> tuple[Optional[Violation], ReplayState]:
    """Replay (side, sm_id, word) writes against the handshake rules.

    The per-SM start state is inferred: a leading device INIT marks a
    recorded boot, otherwise the worker is assumed already idle (cells at
    the NOP sentinel), which is how hand-written post-boot traces look.
    """
    sms: dict[int, _SmReplay] = {}
    for index, (side, sm_id, word) in enumerate(trace):
        if sm_id < 0:
            return Violation(index, f"negative sm_id {sm_id}"), ReplayState(sms)
        sm = sms.setdefault(sm_id, _SmReplay())
        if side == HOST_SIDE:
            v = _host_write(sm, word, index)
        elif side == DEVICE_SIDE:
            v = _device_write(sm, word, index)
        else:
            v = Violation(index, f"unknown side {side!r}")
        if v is not None:
            return v, ReplayState(sms)
    return None, ReplayState(sms)


def validate_trace(trace: Iterable[tuple[str, int, int]]) -> Optional[Violation]:
    """Return None if the trace obeys the handshake, else the first violation."""
    violation, _ = replay_trace(trace)
    return violation


# --------------------------------------------------------------------------
# Trace file format: one `step,side,sm_id,word` record per line.

def format_trace(records: Sequence[TraceRecord]) -> str:
    return "".join(rec.to_line() + "\n" for rec in records)


def parse_trace(text: str) -> list[TraceRecord]:
    """Parse the trace file format, enforcing increasing step indices."""
    records: list[TraceRecord] = []
    last_step = -1
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split(",")
        if len(parts) != 4:
            raise ValueError(f"line {lineno}: expected 4 fields, got {len(parts)}")
        try:
            step = int(parts[0])
            sm_id = int(parts[2])
            word = int(parts[3])
        except ValueError as exc:
            raise ValueError(f"line {lineno}: {exc}") from None
        side = parts[1].strip()
        if side not in (HOST_SIDE, DEVICE_SIDE):
            raise ValueError(f"line {lineno}: side must be H or D, got {side!r}")
        if step <= last_step:
            raise ValueError(f"line {lineno}: step {step} not increasing")
        last_step = step
        records.append(TraceRecord(step, side, sm_id, word))
    return records
