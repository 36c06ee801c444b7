from __future__ import annotations

import pytest

from persistkern import link as l
from persistkern.errors import ConfigError

NO_DEFER = l.LinkModel(deferral_policy=l.POLICY_NONE)


def test_zero_bytes_pays_latency_only():
    assert l.transfer_cycles(NO_DEFER, 0) == NO_DEFER.base_latency_cycles


def test_one_word_defers_under_indefinite_policy():
    link = l.LinkModel(deferral_policy=l.POLICY_INDEFINITE,
                       small_transfer_threshold_bytes=64)
    assert l.transfer_cycles(link, 4) is l.DEFERRED


def test_full_board_ships_under_indefinite_policy():
    link = l.LinkModel(deferral_policy=l.POLICY_INDEFINITE,
                       small_transfer_threshold_bytes=64)
    cycles = l.transfer_cycles(link, 128)
    assert cycles is not l.DEFERRED
    assert cycles == 215   # default calibration's board sync cost


def test_delay_policy_adds_fixed_cost_below_threshold():
    delayed = l.LinkModel(deferral_policy=l.POLICY_DELAY, deferral_delay_cycles=500)
    assert l.transfer_cycles(delayed, 4) == l.transfer_cycles(NO_DEFER, 4) + 500
    assert l.transfer_cycles(delayed, 128) == l.transfer_cycles(NO_DEFER, 128)


def test_transfer_monotone_in_bytes():
    prev = 0
    for nbytes in range(0, 200_000, 997):
        cycles = l.transfer_cycles(NO_DEFER, nbytes)
        assert cycles >= prev
        prev = cycles


def test_effective_bandwidth_never_exceeds_peak():
    for nbytes in (1, 4, 64, 128, 4096, 65_536, 1 << 20):
        cycles = l.transfer_cycles(NO_DEFER, nbytes)
        payload_cycles = cycles - NO_DEFER.base_latency_cycles
        assert nbytes / payload_cycles <= NO_DEFER.peak_bytes_per_cycle + 1e-9


def test_ramp_saturates():
    link = l.LinkModel()
    assert link.bandwidth_fraction(link.ramp_saturation_bytes) == 1.0
    assert link.bandwidth_fraction(link.ramp_saturation_bytes * 10) == 1.0
    assert link.bandwidth_fraction(0) == link.ramp_floor
    fractions = [link.bandwidth_fraction(b) for b in range(0, 70_000, 1000)]
    assert fractions == sorted(fractions)


def test_large_transfer_runs_at_peak():
    nbytes = 1 << 20
    cycles = l.transfer_cycles(NO_DEFER, nbytes)
    assert cycles == NO_DEFER.base_latency_cycles + nbytes / NO_DEFER.peak_bytes_per_cycle


def test_splitting_a_transfer_never_wins():
    whole = l.transfer_cycles(NO_DEFER, 65_536)
    halves = 2 * l.transfer_cycles(NO_DEFER, 32_768)
    assert halves >= whole


def test_mailbox_sync_scopes():
    link = l.LinkModel(deferral_policy=l.POLICY_INDEFINITE)
    board = l.transfer_cycles(link, 128)
    assert l.mailbox_sync_cost(link, 16, l.SCOPE_SINGLE_SM, True) == board
    assert l.mailbox_sync_cost(link, 16, l.SCOPE_FULL_BOARD, False) == board
    assert l.mailbox_sync_cost(link, 16, l.SCOPE_SINGLE_SM, False) is l.DEFERRED
    no_defer_word = l.mailbox_sync_cost(NO_DEFER, 16, l.SCOPE_SINGLE_SM, False)
    assert no_defer_word == l.transfer_cycles(NO_DEFER, 4) == 65


def test_workaround_removes_deferral_entirely():
    link = l.LinkModel(deferral_policy=l.POLICY_INDEFINITE)
    for num_sms in (1, 2, 16, 64):
        for scope in (l.SCOPE_SINGLE_SM, l.SCOPE_FULL_BOARD):
            cost = l.mailbox_sync_cost(link, num_sms, scope, True)
            assert cost is not l.DEFERRED


@pytest.mark.parametrize("kwargs", [
    dict(base_latency_cycles=-1),
    dict(peak_bytes_per_cycle=0),
    dict(deferral_policy="sometimes"),
    dict(deferral_policy=l.POLICY_DELAY, deferral_delay_cycles=0),
    dict(ramp_floor=0.0),
    dict(ramp_floor=1.5),
    dict(ramp_saturation_bytes=0),
])
def test_link_invariants(kwargs):
    with pytest.raises(ConfigError):
        l.LinkModel(**kwargs)


def test_negative_bytes_rejected():
    with pytest.raises(ConfigError):
        l.transfer_cycles(NO_DEFER, -1)
