"""Offload facade tests at the shipped default calibration.

The exact cycle counts asserted here are the documented outcomes of the
default constants (e.g. single-cluster trigger = 23 setup + 1 word write
+ 215 board sync = 239); changing the calibration intentionally breaks
these tests.
"""
from __future__ import annotations

import pytest

from persistkern import host, protocol
from persistkern.calibration import DEFAULT_CALIBRATION, default_device_config
from persistkern.device import WorkDescriptor, build_device
from persistkern.errors import (BusyTriggerError, DisposeWhileBusyError,
                                InitError, UsageError)
from persistkern.link import LinkModel
from persistkern.sim import SimEngine

WORK_20K = WorkDescriptor(slot=0, iterations=20_000)


def make_lk(num_sms=16):
    device = build_device(default_device_config(num_sms))
    engine = SimEngine(device, LinkModel(), cal=DEFAULT_CALIBRATION)
    return host.LkSession(engine)


def make_baseline(num_sms=16):
    device = build_device(default_device_config(num_sms))
    engine = SimEngine(device, LinkModel(), cal=DEFAULT_CALIBRATION)
    return host.BaselineSession(engine)


# --------------------------------------------------------------------------
# masks

def test_mask_helpers():
    assert host.full_mask(16) == 0xFFFF
    assert host.mask_of([0, 3]) == 0b1001
    assert host.sms_in_mask(0b1001) == [0, 3]
    assert host.sms_in_mask(0) == []


def test_phase_timing_requires_mask_for_dispatch_phases():
    with pytest.raises(ValueError):
        host.PhaseTiming(host.PHASE_TRIGGER, 10, 0)
    with pytest.raises(ValueError):
        host.PhaseTiming(host.PHASE_WAIT, 10, 0)
    host.PhaseTiming(host.PHASE_COPYIN, 10, 0)   # copy phases need no mask


# --------------------------------------------------------------------------
# init

def test_init_brings_up_all_workers():
    session = make_lk()
    timing = session.init()
    assert all(sm.worker.phase is protocol.Phase.IDLE
               for sm in session.engine.device.sms)
    assert timing.phase == host.PHASE_INIT
    assert timing.sm_mask == 0xFFFF
    # dominated by the boot constant, plus settle and one confirming read
    assert 509_000_000 <= timing.cycles <= 509_001_000


def test_init_single_sm():
    session = make_lk(num_sms=1)
    session.init()
    assert len(session.engine.device.sms) == 1
    assert session.engine.device.mailboard[0].from_gpu == protocol.NOP


def test_init_boot_announces_before_idling():
    session = make_lk(num_sms=2)
    session.init()
    words = [r.word for r in session.engine.records if r.sm_id == 0]
    assert words == [protocol.INIT, protocol.NOP]


def test_init_rejects_bad_block_mapping():
    session = make_lk(num_sms=4)
    hooked = session.engine.device.block_to_sm
    hooked[0], hooked[1] = hooked[1], hooked[0]
    with pytest.raises(InitError):
        session.init()


def test_double_init_rejected():
    session = make_lk(num_sms=1)
    session.init()
    with pytest.raises(UsageError):
        session.init()


# --------------------------------------------------------------------------
# trigger

def test_single_sm_trigger_is_239_cycles():
    session = make_lk()
    session.init()
    timing = session.trigger(1, WORK_20K)
    assert timing.cycles == 239


def test_full_gpu_trigger_costs_one_board_sync():
    session = make_lk()
    session.init()
    timing = session.trigger(0xFFFF, WORK_20K)
    # setup + 16 word writes + the same single board sync = 254
    assert timing.cycles == 254
    assert abs(timing.cycles - 239) / 239 <= 0.25


def test_trigger_writes_all_masked_words():
    session = make_lk()
    session.init()
    session.trigger(0b101, WorkDescriptor(slot=2, iterations=10))
    board = session.engine.device.mailboard
    assert board[0].to_gpu == 18
    assert board[2].to_gpu == 18
    assert board[1].to_gpu == protocol.NOP


def test_retrigger_busy_sm_rejected():
    session = make_lk()
    session.init()
    session.trigger(1, WORK_20K)
    with pytest.raises(BusyTriggerError):
        session.trigger(1, WORK_20K)
    with pytest.raises(BusyTriggerError):
        session.trigger(0b11, WORK_20K)   # overlap counts as busy


def test_trigger_mask_validation():
    session = make_lk(num_sms=4)
    session.init()
    with pytest.raises(UsageError):
        session.trigger(0, WORK_20K)
    with pytest.raises(UsageError):
        session.trigger(1 << 4, WORK_20K)


def test_trigger_beats_launch_for_every_mask():
    for mask in (1, 0b11, 0xFF, 0xFFFF):
        lk = make_lk()
        lk.init()
        base = make_baseline()
        base.alloc()
        assert lk.trigger(mask, WORK_20K).cycles < base.launch(mask, WORK_20K).cycles


# --------------------------------------------------------------------------
# wait

def test_wait_near_anchor_for_default_work():
    session = make_lk()
    session.init()
    session.trigger(1, WORK_20K)
    timing = session.wait(1)
    assert 190_000 <= timing.cycles <= 190_800
    assert session.engine.device.sms[0].worker.phase is protocol.Phase.IDLE


def test_wait_zero_iterations_is_overhead_only():
    session = make_lk()
    session.init()
    session.trigger(1, WorkDescriptor(slot=0, iterations=0))
    timing = session.wait(1)
    assert timing.cycles <= 3 * 215   # a few board reads, no work term


def test_wait_requires_prior_trigger():
    session = make_lk()
    session.init()
    with pytest.raises(UsageError):
        session.wait(1)
    session.trigger(1, WORK_20K)
    with pytest.raises(UsageError):
        session.wait(0b11)   # cluster 1 was never triggered
    session.wait(1)


def test_wait_allows_retrigger_after():
    session = make_lk()
    session.init()
    for _ in range(3):
        session.trigger(1, WORK_20K)
        session.wait(1)
    assert session.pending_mask == 0


# --------------------------------------------------------------------------
# copy phases

def test_copy_phases_charge_transfer_costs():
    session = make_lk()
    session.init()
    empty = session.copyin(0)
    assert empty.cycles == LinkModel().base_latency_cycles
    saturated = session.copyin(64 * 1024)
    assert saturated.cycles == 60 + 4096
    out = session.copyout(64 * 1024)
    assert out.phase == host.PHASE_COPYOUT
    assert out.cycles == saturated.cycles


# --------------------------------------------------------------------------
# dispose

def test_dispose_exits_all_workers_near_anchor():
    session = make_lk()
    session.init()
    session.trigger(1, WORK_20K)
    session.wait(1)
    timing = session.dispose()
    assert all(sm.worker.phase is protocol.Phase.EXITED
               for sm in session.engine.device.sms)
    assert 30_000_000 <= timing.cycles <= 30_001_000
    with pytest.raises(UsageError):
        session.trigger(1, WORK_20K)


def test_dispose_while_busy_rejected():
    session = make_lk()
    session.init()
    session.trigger(1, WORK_20K)
    with pytest.raises(DisposeWhileBusyError):
        session.dispose()


def test_session_trace_validates():
    session = make_lk(num_sms=4)
    session.init()
    for rep in range(3):
        session.trigger(0b1111, WorkDescriptor(slot=rep, iterations=50 * rep))
        session.wait(0b1111)
    session.dispose()
    writes = [(r.side, r.sm_id, r.word) for r in session.engine.records]
    assert protocol.validate_trace(writes) is None


# --------------------------------------------------------------------------
# baseline

def test_baseline_phase_anchors():
    session = make_baseline()
    alloc = session.alloc()
    assert alloc.cycles == 496_000_000
    launch = session.launch(1, WORK_20K)
    assert launch.cycles == 3858
    wait = session.wait(1)
    assert 190_000 <= wait.cycles <= 190_800
    dispose = session.dispose()
    assert dispose.cycles == 274_000


def test_baseline_launch_cost_flat_across_masks():
    single = make_baseline()
    single.alloc()
    full = make_baseline()
    full.alloc()
    assert (single.launch(1, WORK_20K).cycles
            == full.launch(0xFFFF, WORK_20K).cycles)


def test_baseline_usage_errors():
    session = make_baseline()
    with pytest.raises(UsageError):
        session.launch(1, WORK_20K)
    session.alloc()
    with pytest.raises(UsageError):
        session.wait(1)
    session.launch(1, WORK_20K)
    with pytest.raises(UsageError):
        session.launch(1, WORK_20K)
    with pytest.raises(DisposeWhileBusyError):
        session.dispose()
    session.wait(1)
    session.dispose()


# --------------------------------------------------------------------------
# repeatability

def test_identical_stages_report_identical_timings():
    session = make_lk()
    session.init()
    timings = []
    for _ in range(5):
        t = session.trigger(1, WORK_20K)
        w = session.wait(1)
        timings.append((t.cycles, w.cycles))
    assert len(set(timings)) == 1


def test_timing_rows_csv_export():
    session = make_lk()
    init = session.init()
    trig = session.trigger(1, WORK_20K)
    rows = [("run0", host.MODEL_LK, init), ("run0", host.MODEL_LK, trig)]
    text = host.timings_csv(rows)
    lines = text.splitlines()
    assert lines[0] == "run_id,model,phase,sm_mask,cycles"
    assert lines[2] == f"run0,LK,Trigger,1,{trig.cycles}"
    native_text = host.timings_csv(rows, backend="native")
    assert native_text.splitlines()[0].endswith(",backend")
    assert native_text.splitlines()[1].endswith(",native")


def test_descriptor_slot_locked_while_in_flight():
    session = make_lk()
    session.init()
    session.trigger(0b01, WORK_20K)
    # same slot, different clusters: the in-flight descriptor is read-only
    with pytest.raises(UsageError):
        session.trigger(0b10, WORK_20K)
    session.trigger(0b10, WorkDescriptor(slot=1, iterations=100))
    session.wait(0b11)
    session.trigger(0b01, WORK_20K)   # slot free again after the wait
    session.wait(0b01)


def test_wait_parity_between_models():
    lk = make_lk()
    lk.init()
    lk.trigger(1, WORK_20K)
    lk_wait = lk.wait(1).cycles
    base = make_baseline()
    base.alloc()
    base.launch(1, WORK_20K)
    base_wait = base.wait(1).cycles
    assert abs(lk_wait - base_wait) / base_wait <= 0.15
    # the gap is poll/sync overhead, never the work size
    assert abs(lk_wait - base_wait) <= 1000
