"""Scenario runner: repeated offload stages, aggregated per-phase stats.

A scenario runs Init (or Alloc) once, then ``reps`` stages of dispatch
plus wait, then Dispose once, for the persistent-worker model and/or the
spawn-per-kernel baseline, on either the simulated or the native backend.
Aggregates are min / average / worst / stddev per phase; comparisons are
expressed as ratios so they hold independently of the calibration's
absolute scale.

Built-in scenarios:
    table2-single-sm   average latency profile, one cluster targeted
    table2-full-gpu    average latency profile, all clusters targeted
    table3-worst       worst-vs-average spread under the synthetic jitter
    pathology          the small-transfer deferral hang and its workaround
"""
from __future__ import annotations

import hashlib
import statistics
from dataclasses import dataclass, field, fields
from typing import Optional

from . import host, native
from .calibration import (Calibration, DEFAULT_CALIBRATION, calibration_hash,
                          default_device_config)
from .device import DeviceConfig, WorkDescriptor, build_device
from .errors import HangDetected, PersistkernError, UsageError
from .link import LinkModel, POLICY_INDEFINITE
from .sim import JitterModel, SimEngine

BACKEND_SIM = "sim"
BACKEND_NATIVE = "native"
MODEL_BOTH = "both"

# threshold gates applied to table2-style comparison reports
TRIGGER_RATIO_MIN = 10.0
WAIT_DELTA_MAX = 0.15
DISPOSE_RATIO_MIN = 10.0
# spread bands applied to table3-style runs
TRIGGER_SPREAD_BAND = (3.0, 6.5)
SPAWN_SPREAD_BAND = (1.5, 3.0)


class ScenarioFailure(PersistkernError):
    def __init__(self, message: str, *, phase: str = "", rep: int = -1):
        super().__init__(message)
        self.phase = phase
        self.rep = rep


@dataclass(frozen=True)
class Scenario:
    name: str
    backend: str = BACKEND_SIM
    model: str = MODEL_BOTH            # LK | BASE | both
    sm_scope: str = "single_sm"        # single_sm | full_gpu
    reps: int = 100
    work_iterations: int = 20_000
    work_slot: int = 0
    seed: int = 0
    jitter_base_range: int = 0
    jitter_spike_prob: float = 0.0
    jitter_spike_lo: int = 0
    jitter_spike_hi: int = 0
    link_policy: str = POLICY_INDEFINITE
    deferral_delay_cycles: int = 0
    workaround_full_board: bool = True
    num_sms: int = 16
    cal: Calibration = DEFAULT_CALIBRATION
    # full overrides; when set they win over num_sms / link_policy
    device: Optional[DeviceConfig] = None
    link: Optional[LinkModel] = None

    def __post_init__(self) -> None:
        if self.reps < 1:
            raise UsageError("reps must be >= 1")
        if self.backend not in (BACKEND_SIM, BACKEND_NATIVE):
            raise UsageError(f"unknown backend {self.backend!r}")
        if self.model not in (host.MODEL_LK, host.MODEL_BASELINE, MODEL_BOTH):
            raise UsageError(f"unknown model {self.model!r}")
        if self.sm_scope not in ("single_sm", "full_gpu"):
            raise UsageError(f"unknown sm_scope {self.sm_scope!r}")

    def models(self) -> list[str]:
        if self.model == MODEL_BOTH:
            return [host.MODEL_LK, host.MODEL_BASELINE]
        return [self.model]

    def cluster_count(self) -> int:
        return self.device.num_sms if self.device is not None else self.num_sms

    def mask(self) -> int:
        return 1 if self.sm_scope == "single_sm" else host.full_mask(self.cluster_count())

    def work(self) -> WorkDescriptor:
        return WorkDescriptor(slot=self.work_slot, iterations=self.work_iterations)

    def device_config(self) -> DeviceConfig:
        if self.device is not None:
            return self.device
        return default_device_config(self.num_sms, self.cal)

    def link_model(self) -> LinkModel:
        if self.link is not None:
            return self.link
        return LinkModel(deferral_policy=self.link_policy,
                         deferral_delay_cycles=self.deferral_delay_cycles)

    def jitter(self, model: str) -> JitterModel:
        # distinct streams per model so neither inherits the other's draws
        offset = 0 if model == host.MODEL_LK else 1
        return JitterModel(seed=2 * self.seed + offset,
                           base_range=self.jitter_base_range,
                           spike_prob=self.jitter_spike_prob,
                           spike_lo=self.jitter_spike_lo,
                           spike_hi=self.jitter_spike_hi)


@dataclass(frozen=True)
class PhaseStats:
    model: str
    phase: str
    avg: float
    worst: int
    best: int
    stddev: float
    samples: int

    def spread(self) -> float:
        return self.worst / self.avg if self.avg else 0.0


@dataclass
class RunStats:
    scenario: Scenario
    rows: list[PhaseStats] = field(default_factory=list)

    def get(self, model: str, phase: str) -> PhaseStats:
        for row in self.rows:
            if row.model == model and row.phase == phase:
                return row
        raise KeyError(f"no stats for {model}/{phase}")

    def has(self, model: str, phase: str) -> bool:
        return any(r.model == model and r.phase == phase for r in self.rows)

    def only(self, model: str) -> "RunStats":
        return RunStats(self.scenario, [r for r in self.rows if r.model == model])


def _aggregate(model: str, phase: str, samples: list[int]) -> PhaseStats:
    return PhaseStats(
        model=model, phase=phase,
        avg=statistics.fmean(samples),
        worst=max(samples),
        best=min(samples),
        stddev=statistics.pstdev(samples) if len(samples) > 1 else 0.0,
        samples=len(samples),
    )


def _run_sim_lk(s: Scenario, stats: RunStats) -> None:
    device = build_device(s.device_config())
    engine = SimEngine(device, s.link_model(), cal=s.cal,
                       jitter=s.jitter(host.MODEL_LK),
                       workaround_full_board=s.workaround_full_board)
    session = host.LkSession(engine)
    mask, work = s.mask(), s.work()
    phase, rep = host.PHASE_INIT, -1
    try:
        init = session.init()
        triggers, waits = [], []
        for rep in range(s.reps):
            phase = host.PHASE_TRIGGER
            triggers.append(session.trigger(mask, work).cycles)
            phase = host.PHASE_WAIT
            waits.append(session.wait(mask).cycles)
        phase, rep = host.PHASE_DISPOSE, -1
        dispose = session.dispose()
    except HangDetected as exc:
        raise ScenarioFailure(f"{s.name}: hang in {phase}"
                              + (f" at rep {rep}" if rep >= 0 else "")
                              + f": {exc}", phase=phase, rep=rep) from exc
    stats.rows.append(_aggregate(host.MODEL_LK, host.PHASE_INIT, [init.cycles]))
    stats.rows.append(_aggregate(host.MODEL_LK, host.PHASE_TRIGGER, triggers))
    stats.rows.append(_aggregate(host.MODEL_LK, host.PHASE_WAIT, waits))
    stats.rows.append(_aggregate(host.MODEL_LK, host.PHASE_DISPOSE, [dispose.cycles]))


def _run_sim_baseline(s: Scenario, stats: RunStats) -> None:
    device = build_device(s.device_config())
    engine = SimEngine(device, s.link_model(), cal=s.cal,
                       jitter=s.jitter(host.MODEL_BASELINE),
                       workaround_full_board=s.workaround_full_board)
    session = host.BaselineSession(engine)
    mask, work = s.mask(), s.work()
    phase, rep = host.PHASE_ALLOC, -1
    try:
        alloc = session.alloc()
        launches, waits = [], []
        for rep in range(s.reps):
            phase = host.PHASE_LAUNCH
            launches.append(session.launch(mask, work).cycles)
            phase = host.PHASE_WAIT
            waits.append(session.wait(mask).cycles)
        phase, rep = host.PHASE_DISPOSE, -1
        dispose = session.dispose()
    except HangDetected as exc:
        raise ScenarioFailure(f"{s.name}: hang in {phase}"
                              + (f" at rep {rep}" if rep >= 0 else "")
                              + f": {exc}", phase=phase, rep=rep) from exc
    stats.rows.append(_aggregate(host.MODEL_BASELINE, host.PHASE_ALLOC, [alloc.cycles]))
    stats.rows.append(_aggregate(host.MODEL_BASELINE, host.PHASE_LAUNCH, launches))
    stats.rows.append(_aggregate(host.MODEL_BASELINE, host.PHASE_WAIT, waits))
    stats.rows.append(_aggregate(host.MODEL_BASELINE, host.PHASE_DISPOSE, [dispose.cycles]))


def _run_native_lk(s: Scenario, stats: RunStats) -> None:
    cfg = native.NativeConfig(num_workers=s.cluster_count())
    session, init = native.NativeSession.start(cfg)
    mask, work = s.mask(), s.work()
    triggers, waits = [], []
    for _ in range(s.reps):
        triggers.append(session.trigger(mask, work).cycles)
        waits.append(session.wait(mask).cycles)
    dispose = session.dispose()
    stats.rows.append(_aggregate(host.MODEL_LK, host.PHASE_INIT, [init.cycles]))
    stats.rows.append(_aggregate(host.MODEL_LK, host.PHASE_TRIGGER, triggers))
    stats.rows.append(_aggregate(host.MODEL_LK, host.PHASE_WAIT, waits))
    stats.rows.append(_aggregate(host.MODEL_LK, host.PHASE_DISPOSE, [dispose.cycles]))


def _run_native_baseline(s: Scenario, stats: RunStats) -> None:
    baseline = native.ThreadSpawnBaseline()
    work = s.work()
    launches, waits = [], []
    for _ in range(s.reps):
        launches.append(baseline.launch(work).cycles)
        waits.append(baseline.wait().cycles)
    stats.rows.append(_aggregate(host.MODEL_BASELINE, host.PHASE_LAUNCH, launches))
    stats.rows.append(_aggregate(host.MODEL_BASELINE, host.PHASE_WAIT, waits))


def run_scenario(s: Scenario) -> RunStats:
    stats = RunStats(s)
    for model in s.models():
        if s.backend == BACKEND_SIM:
            if model == host.MODEL_LK:
                _run_sim_lk(s, stats)
            else:
                _run_sim_baseline(s, stats)
        else:
            if model == host.MODEL_LK:
                _run_native_lk(s, stats)
            else:
                _run_native_baseline(s, stats)
    return stats


# -- comparison ------------------------------------------------------------

@dataclass(frozen=True)
class ComparisonReport:
    trigger_ratio: float      # baseline dispatch avg / persistent dispatch avg
    wait_delta: float         # |lk wait - baseline wait| / baseline wait
    dispose_ratio: float      # lk dispose avg / baseline dispose avg

    @property
    def trigger_ok(self) -> bool:
        return self.trigger_ratio >= TRIGGER_RATIO_MIN

    @property
    def wait_ok(self) -> bool:
        return self.wait_delta <= WAIT_DELTA_MAX

    @property
    def dispose_ok(self) -> bool:
        return self.dispose_ratio >= DISPOSE_RATIO_MIN

    @property
    def passed(self) -> bool:
        return self.trigger_ok and self.wait_ok and self.dispose_ok

    def lines(self) -> list[str]:
        return [
            f"trigger_ratio={self.trigger_ratio:.2f} "
            f"(>= {TRIGGER_RATIO_MIN}) {'ok' if self.trigger_ok else 'FAIL'}",
            f"wait_delta={self.wait_delta:.4f} "
            f"(<= {WAIT_DELTA_MAX}) {'ok' if self.wait_ok else 'FAIL'}",
            f"dispose_ratio={self.dispose_ratio:.2f} "
            f"(>= {DISPOSE_RATIO_MIN}) {'ok' if self.dispose_ok else 'FAIL'}",
        ]


def compare(lk: RunStats, base: RunStats) -> ComparisonReport:
    """Ratio report between a persistent-model run and a baseline run."""
    ls, bs = lk.scenario, base.scenario
    if (ls.sm_scope, ls.reps, ls.work_iterations) != (bs.sm_scope, bs.reps,
                                                      bs.work_iterations):
        raise UsageError("comparison requires runs of the same scenario shape")
    lk_trigger = lk.get(host.MODEL_LK, host.PHASE_TRIGGER)
    lk_wait = lk.get(host.MODEL_LK, host.PHASE_WAIT)
    lk_dispose = lk.get(host.MODEL_LK, host.PHASE_DISPOSE)
    b_launch = base.get(host.MODEL_BASELINE, host.PHASE_LAUNCH)
    b_wait = base.get(host.MODEL_BASELINE, host.PHASE_WAIT)
    b_dispose = base.get(host.MODEL_BASELINE, host.PHASE_DISPOSE)
    return ComparisonReport(
        trigger_ratio=b_launch.avg / lk_trigger.avg,
        wait_delta=abs(lk_wait.avg - b_wait.avg) / b_wait.avg,
        dispose_ratio=lk_dispose.avg / b_dispose.avg,
    )


def compare_run(stats: RunStats) -> ComparisonReport:
    """Compare the two models of a single model=both run."""
    return compare(stats.only(host.MODEL_LK), stats.only(host.MODEL_BASELINE))


# -- the deferral pathology --------------------------------------------------

@dataclass(frozen=True)
class PathologyReport:
    hangs_without_workaround: bool
    completes_with_workaround: bool

    @property
    def passed(self) -> bool:
        return self.hangs_without_workaround and self.completes_with_workaround


def pathology_scenario(link_policy: str = POLICY_INDEFINITE,
                       cal: Calibration = DEFAULT_CALIBRATION) -> PathologyReport:
    """Trigger one cluster twice: with and without the full-board workaround.

    Under the indefinite deferral policy the bare single-word sync never
    ships, so the first run must hang; shipping the whole board instead
    must always complete.
    """

    def attempt(workaround: bool) -> bool:
        s = Scenario(name="pathology-attempt", reps=1, link_policy=link_policy,
                     workaround_full_board=workaround, model=host.MODEL_LK,
                     cal=cal)
        try:
            run_scenario(s)
        except ScenarioFailure:
            return False
        return True

    return PathologyReport(
        hangs_without_workaround=not attempt(False),
        completes_with_workaround=attempt(True),
    )


# -- built-in scenarios --------------------------------------------------------

def builtin_scenarios(cal: Calibration = DEFAULT_CALIBRATION) -> dict[str, Scenario]:
    return {
        "table2-single-sm": Scenario(name="table2-single-sm", sm_scope="single_sm",
                                     cal=cal),
        "table2-full-gpu": Scenario(name="table2-full-gpu", sm_scope="full_gpu",
                                    cal=cal),
        "table3-worst": Scenario(name="table3-worst", sm_scope="single_sm",
                                 seed=7,
                                 jitter_base_range=cal.jitter_base_range,
                                 jitter_spike_prob=cal.jitter_spike_prob,
                                 jitter_spike_lo=cal.jitter_spike_lo,
                                 jitter_spike_hi=cal.jitter_spike_hi,
                                 cal=cal),
        "pathology": Scenario(name="pathology", reps=1, model=host.MODEL_LK,
                              workaround_full_board=False, cal=cal),
    }


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    detail: str


def evaluate_scenario(s: Scenario, stats: RunStats) -> list[CheckResult]:
    """Scenario-specific threshold gates for the CLI exit status."""
    checks: list[CheckResult] = []
    for row in stats.rows:
        ok = row.best <= row.avg <= row.worst
        if not ok:
            checks.append(CheckResult(f"ordering {row.model}/{row.phase}", False,
                                      f"min {row.best} avg {row.avg} worst {row.worst}"))
    if s.name.startswith("table2") and s.model == MODEL_BOTH:
        report = compare_run(stats)
        checks.append(CheckResult("trigger_ratio", report.trigger_ok,
                                  f"{report.trigger_ratio:.2f} >= {TRIGGER_RATIO_MIN}"))
        checks.append(CheckResult("wait_delta", report.wait_ok,
                                  f"{report.wait_delta:.4f} <= {WAIT_DELTA_MAX}"))
        checks.append(CheckResult("dispose_ratio", report.dispose_ok,
                                  f"{report.dispose_ratio:.2f} >= {DISPOSE_RATIO_MIN}"))
    if s.name.startswith("table3"):
        trig = stats.get(host.MODEL_LK, host.PHASE_TRIGGER)
        lo, hi = TRIGGER_SPREAD_BAND
        checks.append(CheckResult("trigger_spread", lo <= trig.spread() <= hi,
                                  f"{trig.spread():.2f} in [{lo}, {hi}]"))
        if stats.has(host.MODEL_BASELINE, host.PHASE_LAUNCH):
            spawn = stats.get(host.MODEL_BASELINE, host.PHASE_LAUNCH)
            lo, hi = SPAWN_SPREAD_BAND
            checks.append(CheckResult("spawn_spread", lo <= spawn.spread() <= hi,
                                      f"{spawn.spread():.2f} in [{lo}, {hi}]"))
    if not checks:
        checks.append(CheckResult("completed", True, "scenario ran to completion"))
    return checks


# -- rendering -------------------------------------------------------------------

def _fmt(x: float) -> str:
    if float(x) == int(x):
        return str(int(x))
    return f"{x:.4f}"


def compact(x: float) -> str:
    """Table-friendly magnitude formatting: 509M, 3.9k, 239."""
    if x >= 1e6:
        return f"{x / 1e6:.3g}M"
    if x >= 1e3:
        return f"{x / 1e3:.3g}k"
    return _fmt(round(x, 1))


def scenario_hash(s: Scenario) -> str:
    parts = []
    for f in fields(s):
        value = getattr(s, f.name)
        if isinstance(value, Calibration):
            value = calibration_hash(value, s.link_model())
        parts.append(f"{f.name}={value}")
    return hashlib.sha256(";".join(parts).encode("ascii")).hexdigest()[:12]


def stats_csv(stats: RunStats) -> str:
    """Aggregate report; the header comments pin the exact configuration."""
    s = stats.scenario
    lines = [
        f"# scenario={s.name} backend={s.backend} seed={s.seed} "
        f"config={scenario_hash(s)} calibration={calibration_hash(s.cal, s.link_model())}",
        "scenario,model,phase,avg,worst,min,stddev,reps",
    ]
    for r in stats.rows:
        lines.append(f"{s.name},{r.model},{r.phase},{_fmt(r.avg)},{r.worst},"
                     f"{r.best},{_fmt(r.stddev)},{r.samples}")
    return "\n".join(lines) + "\n"


_LK_COLUMNS = [(host.PHASE_INIT, "LK Init"), (host.PHASE_TRIGGER, "LK Trigger"),
               (host.PHASE_WAIT, "LK Wait"), (host.PHASE_DISPOSE, "LK Dispose")]
_BASE_COLUMNS = [(host.PHASE_ALLOC, "CUDA Alloc"), (host.PHASE_LAUNCH, "CUDA Spawn"),
                 (host.PHASE_WAIT, "CUDA Wait"), (host.PHASE_DISPOSE, "CUDA Dispose")]


def render_table(stats: RunStats) -> str:
    """Fixed-width text table in the two-row-per-model layout."""
    s = stats.scenario
    width = 14

    def grid(pick) -> list[str]:
        out = []
        for model, columns in ((host.MODEL_LK, _LK_COLUMNS),
                               (host.MODEL_BASELINE, _BASE_COLUMNS)):
            names, values = [], []
            for phase, label in columns:
                if stats.has(model, phase):
                    names.append(label)
                    values.append(compact(pick(stats.get(model, phase))))
            if names:
                out.append(" | ".join(f"{n:>{width}}" for n in names))
                out.append(" | ".join(f"{v:>{width}}" for v in values))
        return out

    title = f"scenario {s.name} (backend={s.backend}, scope={s.sm_scope}, reps={s.reps})"
    unit = "host cycles" if s.backend == BACKEND_SIM else "nanoseconds"
    lines = [title, f"units: {unit}; all modeled costs included", ""]
    lines.append("Average values")
    lines += grid(lambda r: r.avg)
    if any(r.worst != r.best for r in stats.rows):
        lines.append("")
        lines.append("Worst values (synthetic jitter calibration, seed-pinned)")
        lines += grid(lambda r: r.worst)
    return "\n".join(lines) + "\n"
