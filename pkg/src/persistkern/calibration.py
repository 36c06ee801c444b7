"""Shipped calibration: the constants behind the default latency profile.

Every number here is a tunable model constant, not a measurement. The
``ANCHORS`` table records the published reference values each default was
tuned against, and ``calibration_hash`` fingerprints the active constants
so reports can prove which calibration produced them.

Derivation of the headline defaults (1 GHz reporting clock, 16 clusters):

- board sync     = 60 + ceil(128 / (16 * f(128)))        = 215 cycles
- trigger (1 SM) = 23 setup + 1 word write + 215 sync    = 239 cycles
- spawn          = 3500 setup + 60 + ceil(256/(16*f..))  = 3858 cycles
- wait (20k-iteration loop) = 20000 * 9.5 per-iteration  ~ 190k cycles

The synthetic jitter profile is a mixture: a uniform base draw plus a
rare uniform spike. A pure uniform additive term cannot push worst/avg
much past 2.0, while the reference spread for the trigger phase is ~4.6;
the spike supplies the tail, and the table3 scenario pins the seed.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, fields

from .device import DeviceConfig
from .link import LinkModel


@dataclass(frozen=True)
class Calibration:
    # host-side phase constants (cycles)
    trigger_setup_cycles: int = 23
    mailbox_word_write_cycles: int = 1
    launch_setup_cycles: int = 3500
    init_boot_cycles: int = 509_000_000
    alloc_setup_cycles: int = 496_000_000
    lk_teardown_cycles: int = 30_000_000
    baseline_teardown_cycles: int = 274_000
    # link payload sizes (bytes)
    launch_packet_bytes: int = 256
    completion_poll_bytes: int = 128
    # simulated worker loop
    poll_interval_cycles: int = 8
    hang_budget_cycles: int = 250_000
    # workload cost under the calibrated profile (cycles per loop iteration)
    cycles_per_iteration: float = 9.5
    # synthetic jitter profile for worst-vs-average scenarios
    jitter_base_range: int = 1600
    jitter_spike_prob: float = 0.10
    jitter_spike_lo: int = 5000
    jitter_spike_hi: int = 6000


DEFAULT_CALIBRATION = Calibration()

# Published reference values the defaults were tuned toward, keyed by the
# quantity they anchor. Averages unless named worst.
ANCHORS = {
    "lk_init": 509_000_000,
    "lk_trigger_single_sm": 239,
    "lk_trigger_full_gpu": 210,
    "lk_wait": 190_000,
    "lk_dispose": 30_000_000,
    "baseline_alloc": 496_000_000,
    "baseline_spawn_single_sm": 3_900,
    "baseline_spawn_full_gpu": 3_800,
    "baseline_wait": 175_000,
    "baseline_dispose": 274_000,
    "worst_lk_trigger": 1_100,
    "worst_baseline_spawn": 7_700,
    "link_peak_bytes_per_sec_at_1ghz": 16_000_000_000,
}


def default_device_config(num_sms: int = 16,
                          cal: Calibration = DEFAULT_CALIBRATION) -> DeviceConfig:
    """Device profile the benchmarks run against.

    Note cycles_per_iteration: the bare DeviceConfig default is 1.0, but
    the calibrated profile uses 9.5 so the standard 20k-iteration load
    occupies a cluster for ~190k host cycles, matching the wait anchor.
    """
    return DeviceConfig(num_sms=num_sms, cycles_per_iteration=cal.cycles_per_iteration)


def default_link_model() -> LinkModel:
    return LinkModel()


def calibration_lines(cal: Calibration = DEFAULT_CALIBRATION,
                      link: LinkModel | None = None) -> list[str]:
    """Canonical key=value dump used for both display and hashing."""
    link = link if link is not None else default_link_model()
    lines = [f"calibration.{f.name}={getattr(cal, f.name)}" for f in fields(cal)]
    lines += [f"link.{f.name}={getattr(link, f.name)}" for f in fields(link)]
    return lines


def calibration_hash(cal: Calibration = DEFAULT_CALIBRATION,
                     link: LinkModel | None = None) -> str:
    text = "\n".join(calibration_lines(cal, link))
    return hashlib.sha256(text.encode("ascii")).hexdigest()[:12]
