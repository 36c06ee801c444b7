"""Command-line entry point.

Subcommands:
    run          execute a named scenario, write CSV + table reports
    validate     check a recorded mailbox trace file for handshake violations
    calibration  dump the active calibration constants, anchors, and hash

Exit codes: 0 pass, 1 scenario/threshold failure or trace violation,
2 usage or configuration error. The seed resolves flag > config file >
PERSISTKERN_SEED > scenario default.
"""
from __future__ import annotations

import argparse
import dataclasses
import os
import sys
from pathlib import Path
from typing import Optional

from . import bench, protocol
from .calibration import (ANCHORS, Calibration, DEFAULT_CALIBRATION,
                          calibration_hash, calibration_lines)
from .device import DeviceConfig
from .errors import PersistkernError
from .link import LinkModel

SEED_ENV_VAR = "PERSISTKERN_SEED"

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2


class ConfigFileError(Exception):
    pass


def parse_config_text(text: str) -> dict[str, str]:
    """Flat dotted-key config: `section.key = value`, `#` comments."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigFileError(f"line {lineno}: expected key = value")
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.split("#", 1)[0].strip()
        if not key or not value:
            raise ConfigFileError(f"line {lineno}: empty key or value")
        if key in out:
            raise ConfigFileError(f"line {lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def _coerce(value: str, target_type) -> object:
    if target_type is bool:
        lowered = value.lower()
        if lowered in ("on", "true", "1", "yes"):
            return True
        if lowered in ("off", "false", "0", "no"):
            return False
        raise ConfigFileError(f"expected on/off, got {value!r}")
    try:
        return target_type(value)
    except (TypeError, ValueError):
        raise ConfigFileError(f"expected {target_type.__name__}, got {value!r}") from None


def _apply_section(cls, prefix: str, kv: dict[str, str], defaults):
    """Build a dataclass from `prefix.field` keys, validating field names."""
    values = {}
    known = {f.name: f for f in dataclasses.fields(cls)}
    for key, raw in kv.items():
        if not key.startswith(prefix + "."):
            continue
        name = key[len(prefix) + 1:]
        if name not in known:
            raise ConfigFileError(f"unknown key {key!r}")
        ftype = known[name].type
        target = {"int": int, "float": float, "bool": bool, "str": str}.get(ftype, str)
        values[name] = _coerce(raw, target)
    if not values:
        return defaults
    return dataclasses.replace(defaults, **values)


@dataclasses.dataclass
class CliConfig:
    device: Optional[DeviceConfig]
    link: Optional[LinkModel]
    cal: Calibration
    scenario_overrides: dict[str, object]
    seed: Optional[int]


_SCENARIO_KEYS = {
    "reps": int, "work_iterations": int, "work_slot": int, "sm_scope": str,
    "model": str, "backend": str, "num_sms": int, "link_policy": str,
    "deferral_delay_cycles": int, "workaround_full_board": bool,
    "jitter_base_range": int, "jitter_spike_prob": float,
    "jitter_spike_lo": int, "jitter_spike_hi": int,
}


def build_cli_config(kv: dict[str, str]) -> CliConfig:
    cal = _apply_section(Calibration, "calibration", kv, DEFAULT_CALIBRATION)
    device = None
    if any(k.startswith("device.") for k in kv):
        device = _apply_section(DeviceConfig, "device", kv, DeviceConfig())
    link = None
    if any(k.startswith("link.") for k in kv):
        link = _apply_section(LinkModel, "link", kv, LinkModel())
    overrides: dict[str, object] = {}
    seed: Optional[int] = None
    for key, raw in kv.items():
        if key == "seed":
            seed = int(_coerce(raw, int))
        elif key.startswith("scenario."):
            name = key[len("scenario."):]
            if name not in _SCENARIO_KEYS:
                raise ConfigFileError(f"unknown key {key!r}")
            overrides[name] = _coerce(raw, _SCENARIO_KEYS[name])
        elif key.split(".", 1)[0] not in ("device", "link", "calibration"):
            raise ConfigFileError(f"unknown key {key!r}")
    return CliConfig(device=device, link=link, cal=cal,
                     scenario_overrides=overrides, seed=seed)


def _load_config(path: Optional[str]) -> CliConfig:
    if path is None:
        return CliConfig(None, None, DEFAULT_CALIBRATION, {}, None)
    text = Path(path).read_text(encoding="ascii")
    return build_cli_config(parse_config_text(text))


def _resolve_seed(arg_seed: Optional[int], cfg: CliConfig) -> Optional[int]:
    if arg_seed is not None:
        return arg_seed
    if cfg.seed is not None:
        return cfg.seed
    env = os.environ.get(SEED_ENV_VAR)
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise ConfigFileError(f"{SEED_ENV_VAR}={env!r} is not an integer") from None
    return None


def cmd_run(args: argparse.Namespace) -> int:
    try:
        cfg = _load_config(args.config)
        seed = _resolve_seed(args.seed, cfg)
    except (ConfigFileError, OSError, PersistkernError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE

    scenarios = bench.builtin_scenarios(cfg.cal)
    if args.scenario not in scenarios:
        known = ", ".join(sorted(scenarios))
        print(f"unknown scenario {args.scenario!r} (known: {known})", file=sys.stderr)
        return EXIT_USAGE

    overrides = dict(cfg.scenario_overrides)
    if seed is not None:
        overrides["seed"] = seed
    if args.backend is not None:
        overrides["backend"] = args.backend
    if args.workaround is not None:
        overrides["workaround_full_board"] = args.workaround == "on"
    if cfg.device is not None:
        overrides["device"] = cfg.device
    if cfg.link is not None:
        overrides["link"] = cfg.link
    try:
        scenario = dataclasses.replace(scenarios[args.scenario], **overrides)
    except PersistkernError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE

    out_dir = Path(args.out) if args.out else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    if args.scenario == "pathology":
        report = bench.pathology_scenario(link_policy=scenario.link_policy,
                                          cal=scenario.cal)
        lines = [
            f"hangs_without_workaround={report.hangs_without_workaround}",
            f"completes_with_workaround={report.completes_with_workaround}",
        ]
        print("\n".join(lines))
        if out_dir is not None:
            (out_dir / "pathology.txt").write_text("\n".join(lines) + "\n",
                                                   encoding="ascii")
        return EXIT_OK if report.passed else EXIT_FAILURE

    try:
        stats = bench.run_scenario(scenario)
    except bench.ScenarioFailure as exc:
        print(f"scenario failed: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    except PersistkernError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE

    csv_text = bench.stats_csv(stats)
    table_text = bench.render_table(stats)
    checks = bench.evaluate_scenario(scenario, stats)
    print(table_text)
    for check in checks:
        print(f"check {check.name}: {'PASS' if check.passed else 'FAIL'} ({check.detail})")
    if out_dir is not None:
        (out_dir / f"{scenario.name}.csv").write_text(csv_text, encoding="ascii")
        (out_dir / f"{scenario.name}.txt").write_text(table_text, encoding="ascii")
    return EXIT_OK if all(c.passed for c in checks) else EXIT_FAILURE


def cmd_validate(args: argparse.Namespace) -> int:
    try:
        text = Path(args.trace_file).read_text(encoding="ascii")
        records = protocol.parse_trace(text)
    except (OSError, ValueError) as exc:
        print(f"parse error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    violation = protocol.validate_trace((r.side, r.sm_id, r.word) for r in records)
    if violation is None:
        print(f"ok ({len(records)} records)")
        return EXIT_OK
    print(str(violation))
    return EXIT_FAILURE


def cmd_calibration(args: argparse.Namespace) -> int:
    try:
        cfg = _load_config(args.config)
    except (ConfigFileError, OSError, PersistkernError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    link = cfg.link if cfg.link is not None else LinkModel()
    print(f"calibration hash: {calibration_hash(cfg.cal, link)}")
    for line in calibration_lines(cfg.cal, link):
        print(line)
    print("anchors (published reference values the defaults target):")
    for name, value in ANCHORS.items():
        print(f"anchor.{name}={value}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="persistkern",
        description="persistent-worker offload benchmarks and trace tools")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run a named benchmark scenario")
    run.add_argument("--scenario", required=True)
    run.add_argument("--config", help="flat key=value config file")
    run.add_argument("--seed", type=int)
    run.add_argument("--backend", choices=[bench.BACKEND_SIM, bench.BACKEND_NATIVE])
    run.add_argument("--out", help="directory for CSV and table reports")
    run.add_argument("--workaround", choices=["on", "off"],
                     help="full-board transfer workaround for small syncs")
    run.set_defaults(func=cmd_run)

    validate = sub.add_parser("validate", help="validate a mailbox trace file")
    validate.add_argument("trace_file")
    validate.set_defaults(func=cmd_validate)

    cal = sub.add_parser("calibration", help="print calibration constants and anchors")
    cal.add_argument("--config", help="flat key=value config file")
    cal.set_defaults(func=cmd_calibration)
    return parser


def main(argv: Optional[list[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
