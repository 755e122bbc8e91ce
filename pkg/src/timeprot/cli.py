"""Scenario-file driven command line: run, check-ni, capacity and attack-demo.

Scenario files are TOML.  Output is JSON lines: trace events carry the fixed
fields ``time``, ``domain``, ``kind`` and ``detail``; the final ``report``
record is reproducible byte for byte and a trailing ``meta`` record holds the
wall time.

Exit status: 0 on success or NI PASS, 1 on NI FAIL, 2 on any configuration or
run error.
"""

from __future__ import annotations

import argparse
import json
import logging
import platform
import re
import sys
import time
from dataclasses import replace
from importlib import resources
from pathlib import Path

import numpy as np

from . import __version__
from . import harness as h
from . import kernel as k
from .errors import ConfigError, ParseError, TimeProtError, ValidationError
from .march import CacheGeometry
from .timemodel import TimeModelParams
from .workloads import Program, Secret, assemble

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

__all__ = ["parse_scenario", "parse_scenario_text", "shipped_scenarios", "resolve_scenario", "main"]

log = logging.getLogger(__name__)

EXIT_OK, EXIT_FAIL, EXIT_ERROR = 0, 1, 2

MODES = ("run", "check-ni", "capacity", "attack-demo")
SYMBOLS = ("view-hash", "first-observe", "decoded")

_TOP_KEYS = {"name", "hardware", "domains", "protections", "experiment"}
_HW_KEYS = {"l1", "llc", "tlb", "time", "memory", "predictor_size", "kernel_colours"}
_DOMAIN_KEYS = {
    "name", "role", "colours", "slice", "pad", "program", "irqs", "pages", "filler", "filler_margin",
}
_EXP_KEYS = {"mode", "secret_width", "secrets", "symbol", "trials", "max_steps", "workload"}


# -- scenario files ----------------------------------------------------------------


def shipped_scenarios() -> dict[str, Path]:
    """Name -> path of every scenario bundled with the package."""
    root = resources.files("timeprot") / "scenarios"
    return {Path(p.name).stem: Path(str(p)) for p in root.iterdir() if p.name.endswith(".toml")}


def resolve_scenario(name_or_path: str) -> Path:
    path = Path(name_or_path)
    if path.is_file():
        return path
    shipped = shipped_scenarios()
    if name_or_path in shipped:
        return shipped[name_or_path]
    raise ConfigError(
        f"no scenario file {name_or_path!r} and no shipped scenario of that name "
        f"(shipped: {', '.join(sorted(shipped))})"
    )


def _check_keys(table: dict, allowed: set[str], where: str) -> None:
    unknown = sorted(set(table) - allowed)
    if unknown:
        raise ValidationError(f"{where}: unknown key(s) {', '.join(unknown)}")


def _int(value, where: str, minimum: int | None = None) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise ValidationError(f"{where}: expected an integer, got {value!r}")
    if minimum is not None and value < minimum:
        raise ValidationError(f"{where}: must be at least {minimum}, got {value}")
    return value


def _int_set(value, where: str) -> frozenset[int]:
    if not isinstance(value, list):
        raise ValidationError(f"{where}: expected a list of integers")
    return frozenset(_int(v, where, 0) for v in value)


def _geometry(table: dict, where: str, default: CacheGeometry) -> CacheGeometry:
    _check_keys(table, {"sets", "ways", "line_size", "page_size"}, where)
    try:
        return replace(default, **table)
    except (TypeError, ValueError) as e:
        raise ValidationError(f"{where}: {e}") from None


def _hardware(table: dict) -> k.Hardware:
    _check_keys(table, _HW_KEYS, "[hardware]")
    base = k.Hardware()
    changes = {}
    for key in ("l1", "llc", "tlb"):
        if key in table:
            changes[key] = _geometry(table[key], f"[hardware.{key}]", getattr(base, key))
    if "time" in table:
        try:
            changes["params"] = TimeModelParams(**table["time"])
        except (TypeError, ValueError) as e:
            raise ValidationError(f"[hardware.time]: {e}") from None
    if "memory" in table:
        changes["memory"] = _int(table["memory"], "[hardware] memory", 1)
    if "predictor_size" in table:
        changes["predictor_size"] = _int(table["predictor_size"], "[hardware] predictor_size", 1)
    if "kernel_colours" in table:
        changes["kernel_colours"] = _int_set(table["kernel_colours"], "[hardware] kernel_colours")
    hw = replace(base, **changes)
    if hw.tlb.line_size != hw.tlb.page_size:
        raise ValidationError("[hardware.tlb]: line_size must equal page_size")
    if hw.l1.page_size != hw.llc.page_size:
        raise ValidationError("[hardware]: l1 and llc must agree on page_size")
    bad = [c for c in hw.reserved_colours() if not 0 <= c < hw.colours]
    if bad:
        raise ValidationError(f"[hardware] kernel_colours {bad} out of range (0..{hw.colours - 1})")
    return hw


def _program(ref, base: Path, where: str) -> Program:
    if not isinstance(ref, str):
        raise ValidationError(f"{where}: expected a path to a program file")
    path = (base / ref) if not Path(ref).is_absolute() else Path(ref)
    if not path.is_file():
        raise ValidationError(f"{where}: program file {str(path)!r} does not exist")
    return assemble(path.read_text(), source=str(path))


def _domains(entries, base: Path) -> tuple[list[k.Domain], dict[int, str], list[bool]]:
    if not isinstance(entries, list) or not entries:
        raise ValidationError("at least one [[domains]] entry is required")
    domains, roles, explicit_pad = [], {}, []
    for i, d in enumerate(entries):
        where = f"[[domains]] #{i}"
        if not isinstance(d, dict):
            raise ValidationError(f"{where}: expected a table")
        _check_keys(d, _DOMAIN_KEYS, where)
        for key in ("colours", "slice"):
            if key not in d:
                raise ValidationError(f"{where}: missing required key {key!r}")
        role = d.get("role")
        if role is not None:
            if role not in ("hi", "lo"):
                raise ValidationError(f"{where}: role must be 'hi' or 'lo', got {role!r}")
            roles[i] = role
        try:
            domains.append(
                k.Domain(
                    id=i,
                    colours=_int_set(d["colours"], f"{where} colours"),
                    slice=_int(d["slice"], f"{where} slice", 1),
                    pad=_int(d.get("pad", 0), f"{where} pad", 0),
                    program=_program(d["program"], base, f"{where} program") if "program" in d else Program(),
                    irqs=_int_set(d.get("irqs", []), f"{where} irqs"),
                    pages=_int(d.get("pages", 1), f"{where} pages", 0),
                    filler=_program(d["filler"], base, f"{where} filler") if "filler" in d else None,
                    filler_margin=_int(d.get("filler_margin", 0), f"{where} filler_margin", 0),
                    name=str(d.get("name", "")),
                )
            )
        except ConfigError as e:
            if isinstance(e, (ValidationError, ParseError)):
                raise
            raise ValidationError(f"{where}: {e}") from None
        explicit_pad.append("pad" in d)
    return domains, roles, explicit_pad


def _workload(table: dict):
    if not isinstance(table, dict) or "kind" not in table:
        raise ValidationError("[experiment.workload]: needs a 'kind'")
    params = dict(table)
    kind = params.pop("kind")
    if kind not in h.WORKLOADS:
        raise ValidationError(f"[experiment.workload]: unknown kind {kind!r}; expected one of {sorted(h.WORKLOADS)}")
    try:
        return h.WORKLOADS[kind](**params)
    except TypeError as e:
        raise ValidationError(f"[experiment.workload]: {e}") from None


def _default_pads(s: h.Scenario, explicit: list[bool]) -> h.Scenario:
    """Fill omitted pads with a bound no switch can overrun.

    The bound covers the longest in-flight step of every program the domain
    may run, including workload programs for the extreme secrets.
    """
    hw = s.hardware
    programs: dict[int, list[Program]] = {d.id: [d.program] + ([d.filler] if d.filler else []) for d in s.domains}

    def pads() -> tuple[k.Domain, ...]:
        return tuple(
            d if explicit[d.id] else replace(d, pad=max(k.safe_pad(hw, p) for p in programs[d.id]))
            for d in s.domains
        )

    s = replace(s, domains=pads())
    if s.workload is not None:
        for value in {0, 2**s.secret_width - 1}:
            for d in s.domains_for(Secret(value, s.secret_width)):
                programs[d.id].append(d.program)
        s = replace(s, domains=pads())
    return s


def parse_scenario_text(text: str, base: Path | str = ".", source: str | None = None) -> h.Scenario:
    """Parse and validate scenario TOML; relative program paths resolve against ``base``."""
    try:
        doc = tomllib.loads(text)
    except tomllib.TOMLDecodeError as e:
        m = re.search(r"line (\d+)", str(e))
        raise ParseError(str(e), line=int(m.group(1)) if m else None, source=source) from None
    _check_keys(doc, _TOP_KEYS, "scenario")
    base = Path(base)

    hw = _hardware(doc.get("hardware", {}))
    domains, roles, explicit_pad = _domains(doc.get("domains"), base)

    prot_table = doc.get("protections", {})
    _check_keys(prot_table, set(k.MECHANISMS.values()), "[protections]")
    for key, v in prot_table.items():
        if not isinstance(v, bool):
            raise ValidationError(f"[protections] {key}: expected true or false")
    protections = k.Protections(**prot_table)

    exp = doc.get("experiment", {})
    _check_keys(exp, _EXP_KEYS, "[experiment]")
    mode = exp.get("mode", "check-ni")
    if mode not in MODES:
        raise ValidationError(f"[experiment] mode must be one of {MODES}, got {mode!r}")
    width = _int(exp.get("secret_width", 8), "[experiment] secret_width", 1)
    if width > 16:
        raise ValidationError("[experiment] secret_width above 16 bits is not supported")
    raw = exp.get("secrets", "exhaustive")
    if raw == "exhaustive":
        secrets = None
    elif isinstance(raw, list) and raw:
        secrets = tuple(_int(v, "[experiment] secrets", 0) for v in raw)
        too_big = [v for v in secrets if v >= 2**width]
        if too_big:
            raise ValidationError(f"[experiment] secrets {too_big} do not fit in {width} bits")
    else:
        raise ValidationError("[experiment] secrets must be \"exhaustive\" or a non-empty list")
    symbol = exp.get("symbol", "view-hash")
    if symbol not in SYMBOLS:
        raise ValidationError(f"[experiment] symbol must be one of {SYMBOLS}, got {symbol!r}")
    workload = _workload(exp["workload"]) if "workload" in exp else None

    his = [i for i, r in roles.items() if r == "hi"]
    los = [i for i, r in roles.items() if r == "lo"]
    if len(his) > 1 or len(los) > 1:
        raise ValidationError("at most one domain may have role 'hi' and one role 'lo'")
    hi, lo = (his[0] if his else None), (los[0] if los else None)
    if (mode != "run" or workload is not None) and (hi is None or lo is None):
        raise ValidationError(f"mode {mode!r} needs one domain with role 'hi' and one with role 'lo'")

    s = h.Scenario(
        hardware=hw,
        domains=tuple(domains),
        protections=protections,
        hi=hi,
        lo=lo,
        secret_width=width,
        secrets=secrets,
        trials=_int(exp.get("trials", 1), "[experiment] trials", 1),
        workload=workload,
        symbol=symbol,
        mode=mode,
        max_steps=_int(exp.get("max_steps", 2_000_000), "[experiment] max_steps", 1),
        name=str(doc.get("name", Path(source).stem if source else "")),
    )
    try:
        s = _default_pads(s, explicit_pad)
        k.validate_config(hw, s.domains, protections)
    except ValidationError:
        raise
    except ConfigError as e:
        raise ValidationError(str(e)) from None
    return s


def parse_scenario(path) -> h.Scenario:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as e:
        raise ConfigError(f"cannot read scenario {str(path)!r}: {e.strerror}") from None
    return parse_scenario_text(text, base=path.parent, source=str(path))


# -- reports -----------------------------------------------------------------------


def _emit(out, record: dict) -> None:
    out.write(json.dumps(record, sort_keys=True, separators=(",", ":")) + "\n")


def _event_record(e: k.Event) -> dict:
    return {"time": e.time, "domain": e.domain, "kind": e.kind, "detail": e.detail}


def _report(command: str, s: h.Scenario, seed: int | None, **body) -> dict:
    return {
        "record": "report",
        "command": command,
        "scenario": s.name,
        "config_hash": h.config_hash(s),
        "protections": h.canonical(s.protections),
        "seed": seed,
        "versions": {"timeprot": __version__, "python": platform.python_version(), "numpy": np.__version__},
        **body,
    }


def _cmd_run(s, args, out) -> int:
    secret = args.secret if args.secret is not None else (s.secret_values()[0])
    trace = h.run(s, secret)
    if args.trace:
        with open(args.trace, "w") as f:
            for e in trace:
                _emit(f, _event_record(e))
    else:
        for e in trace:
            _emit(out, _event_record(e))
    obs = h.observations(h.lo_view(trace, s.lo)) if s.lo is not None else []
    _emit(
        out,
        _report(
            "run", s, args.seed,
            secret=secret,
            events=len(trace),
            end_time=trace[-1].time if trace else 0,
            lo_observations=[[t, label] for t, label in obs],
        ),
    )
    return EXIT_OK


def _cmd_check_ni(s, args, out) -> int:
    v = h.check_ni(s, workers=args.jobs)
    _emit(
        out,
        _report(
            "check-ni", s, args.seed,
            verdict=v.label,
            runs=v.runs,
            divergence=v.divergence.to_json() if v.divergence else None,
        ),
    )
    print(f"check-ni {s.name}: {v.label} ({v.runs} runs)", file=sys.stderr)
    return EXIT_OK if v.passed else EXIT_FAIL


def _cmd_capacity(s, args, out) -> int:
    symbol = args.symbol or s.symbol
    m = h.channel_matrix(s, symbol=symbol, workers=args.jobs)
    mi = h.mutual_information(m)
    rows = [[[j, float(p)] for j, p in enumerate(row) if p > 0] for row in m.probs]
    _emit(
        out,
        _report(
            "capacity", s, args.seed,
            symbol=symbol,
            mi_bits=round(mi, 12),
            secrets=list(m.secrets),
            symbols=[h.canonical(x) for x in m.symbols],
            matrix=rows,
        ),
    )
    print(f"capacity {s.name}: {mi:.6f} bits ({symbol})", file=sys.stderr)
    return EXIT_OK


def _cmd_attack_demo(s, args, out) -> int:
    result = h.attack_demo(s, workers=args.jobs)
    for true, recovered in result.pairs:
        _emit(out, {"record": "attack", "secret": true, "recovered": recovered, "correct": true == recovered})
    _emit(out, _report("attack-demo", s, args.seed, accuracy=result.accuracy, runs=len(result.pairs)))
    print(f"attack-demo {s.name}: accuracy {result.accuracy:.1%} over {len(result.pairs)} secrets", file=sys.stderr)
    return EXIT_OK


COMMANDS = {"run": _cmd_run, "check-ni": _cmd_check_ni, "capacity": _cmd_capacity, "attack-demo": _cmd_attack_demo}


def _cmd_list(args, out) -> int:
    shipped = sorted(shipped_scenarios().items())
    width = max((len(n) for n, _ in shipped), default=0)
    for name, path in shipped:
        try:
            s = parse_scenario(path)
            kind = s.workload.kind if s.workload is not None else "static"
        except TimeProtError as e:
            kind = f"invalid: {e}"
        designated = [m for m, n in h.DESIGNATED.items() if n == name]
        line = f"{name:{width}}  {kind:13}"
        if designated:
            line += f" needs: {', '.join(designated)}"
        out.write(line.rstrip() + "\n")
    return EXIT_OK


# -- argument parsing ----------------------------------------------------------------


def _parser() -> argparse.ArgumentParser:
    mechanisms = sorted(set(k.MECHANISMS) | set(k.MECHANISMS.values()))
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--off", action="append", default=[], choices=mechanisms, metavar="MECH",
                        help=f"disable a protection mechanism (repeatable): {', '.join(sorted(k.MECHANISMS))}")
    common.add_argument("--seed", type=int, default=None,
                        help="reserved for nondeterministic scenarios; recorded in the report")
    common.add_argument("--jobs", "-j", type=int, default=1, help="worker processes for paired runs")
    common.add_argument("--verbose", "-v", action="store_true")

    p = argparse.ArgumentParser(prog="timeprot", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", parents=[common], help="run one secret and dump the trace")
    r.add_argument("scenario", help="scenario file or shipped scenario name")
    r.add_argument("--secret", type=int, default=None)
    r.add_argument("--trace", metavar="PATH", help="write trace events here instead of stdout")

    c = sub.add_parser("check-ni", parents=[common], help="paired-run noninterference check")
    c.add_argument("scenario")

    m = sub.add_parser("capacity", parents=[common], help="mutual information of the Lo channel")
    m.add_argument("scenario")
    m.add_argument("--symbol", choices=SYMBOLS, default=None)

    a = sub.add_parser("attack-demo", parents=[common], help="decode the secret from Lo's view")
    a.add_argument("scenario", nargs="?", default=None,
                   help="defaults to the scenario designated for the single --off mechanism")

    e = sub.add_parser("experiment", parents=[common], help="run the mode named in the scenario file")
    e.add_argument("scenario")
    e.add_argument("--secret", type=int, default=None)
    e.add_argument("--trace", metavar="PATH")
    e.add_argument("--symbol", choices=SYMBOLS, default=None)

    sub.add_parser("list", help="list shipped scenarios")
    return p


def _default_attack_scenario(off: list[str]) -> str:
    short = {v: key for key, v in k.MECHANISMS.items()}
    names = {short.get(o, o) for o in off}
    if len(names) == 1:
        return h.DESIGNATED[names.pop()]
    return h.DESIGNATED["flush"]


def main(argv: list[str] | None = None, out=None) -> int:
    out = out or sys.stdout
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s: %(message)s", stream=sys.stderr)
    if args.command == "list":
        return _cmd_list(args, out)

    started = time.perf_counter()
    try:
        name = args.scenario
        if name is None:
            name = _default_attack_scenario(args.off)
        s = parse_scenario(resolve_scenario(name))
        if args.off:
            s = s.without(*args.off)
        if args.jobs < 1:
            raise ConfigError("--jobs must be at least 1")
        command = s.mode if args.command == "experiment" else args.command
        if command == "attack-demo" and s.workload is None:
            raise ConfigError(f"scenario {s.name!r} has no workload to decode")
        for attr in ("secret", "trace", "symbol"):
            if not hasattr(args, attr):
                setattr(args, attr, None)
        status = COMMANDS[command](s, args, out)
    except (TimeProtError, OSError) as e:
        where = ""
        if getattr(e, "secret", None) is not None:
            where = f" (scenario {e.scenario!r}, secret {e.secret})"
        print(f"timeprot: error: {type(e).__name__}: {e}{where}", file=sys.stderr)
        return EXIT_ERROR
    _emit(out, {"record": "meta", "wall_time_s": round(time.perf_counter() - started, 6)})
    return status


if __name__ == "__main__":
    sys.exit(main())
