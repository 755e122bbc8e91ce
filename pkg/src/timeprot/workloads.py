"""Program representation, the assembler, and attack/defence workload generators."""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import NamedTuple, Union

from .errors import ConfigError, ParseError
from .march import CacheGeometry, num_colours, sets_per_colour

__all__ = [
    "Load",
    "Store",
    "Compute",
    "Observe",
    "SecretLoad",
    "Syscall",
    "Io",
    "Halt",
    "Instruction",
    "Program",
    "Secret",
    "ProbeResult",
    "assemble",
    "PrimeProbeConfig",
    "gen_prime_probe",
    "probe_result",
    "decode_probe",
    "FlushChannelConfig",
    "gen_flush_latency_channel",
    "DowngraderFragment",
    "gen_downgrader",
    "IrqChannelConfig",
    "gen_irq_channel",
    "decode_irq_ticks",
    "SyscallChannelConfig",
    "gen_syscall_channel",
    "decode_syscall_timings",
    "syscall_durations",
]


class Load(NamedTuple):
    vaddr: int


class Store(NamedTuple):
    vaddr: int


class Compute(NamedTuple):
    cycles: int


class Observe(NamedTuple):
    label: str


class SecretLoad(NamedTuple):
    base: int
    stride: int


class Syscall(NamedTuple):
    number: int = 0


class Io(NamedTuple):
    """Request device I/O whose completion raises ``irq`` after ``delay`` cycles."""

    irq: int
    delay: int


class Halt(NamedTuple):
    pass


Instruction = Union[Load, Store, Compute, Observe, SecretLoad, Syscall, Io, Halt]

_MNEMONIC = {
    Load: "LOAD",
    Store: "STORE",
    Compute: "COMPUTE",
    Observe: "OBSERVE",
    SecretLoad: "SECRET_LOAD",
    Syscall: "SYSCALL",
    Io: "IO",
    Halt: "HALT",
}


@dataclass(frozen=True)
class Program:
    instructions: tuple[Instruction, ...] = ()

    def __len__(self) -> int:
        return len(self.instructions)

    def __getitem__(self, i: int) -> Instruction:
        return self.instructions[i]

    def __iter__(self):
        return iter(self.instructions)

    def source(self) -> str:
        """Render back to assembler text; ``assemble(p.source()) == p``."""
        out = []
        for ins in self.instructions:
            name = _MNEMONIC[type(ins)]
            args = []
            for v in ins:
                args.append(hex(v) if isinstance(v, int) and type(ins) in (Load, Store, SecretLoad) else str(v))
            out.append(" ".join([name, *args]))
        return "\n".join(out) + ("\n" if out else "")

    def vpns(self, page_size: int, max_secret: int = 0) -> set[int]:
        """Virtual pages the program can touch, over secrets ``0..max_secret``."""
        pages = set()
        for ins in self.instructions:
            if isinstance(ins, (Load, Store)):
                pages.add(ins.vaddr // page_size)
            elif isinstance(ins, SecretLoad):
                for s in range(max_secret + 1):
                    pages.add((ins.base + s * ins.stride) // page_size)
        return pages


@dataclass(frozen=True)
class Secret:
    value: int
    width: int

    def __post_init__(self):
        if self.width < 0 or not 0 <= self.value < 2**self.width:
            raise ValueError(f"secret {self.value} does not fit in {self.width} bits")

    def bit(self, i: int) -> int:
        return (self.value >> i) & 1


@dataclass(frozen=True)
class ProbeResult:
    """Measured probe latencies keyed by set ordinal within a colour.

    Each entry holds one latency per probed way, in probe order.
    """

    latencies: dict[int, tuple[int, ...]]


_LABEL = re.compile(r"^[A-Za-z0-9_:.\-]+$")


def _int(tok: str, lineno: int, source) -> int:
    try:
        v = int(tok, 0)
    except ValueError:
        raise ParseError(f"bad numeric literal {tok!r}", lineno, source) from None
    if v < 0:
        raise ParseError(f"negative operand {tok!r}", lineno, source)
    return v


_ARITY = {
    "LOAD": (1, 1),
    "STORE": (1, 1),
    "COMPUTE": (1, 1),
    "OBSERVE": (1, 1),
    "SECRET_LOAD": (2, 2),
    "SYSCALL": (0, 1),
    "IO": (2, 2),
    "HALT": (0, 0),
}


def assemble(text: str, source: str | None = None) -> Program:
    """Parse one instruction per line; ``#`` starts a comment."""
    out: list[Instruction] = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        mnemonic, *ops = line.split()
        mnemonic = mnemonic.upper()
        if mnemonic not in _ARITY:
            raise ParseError(f"unknown mnemonic {mnemonic!r}", lineno, source)
        lo, hi = _ARITY[mnemonic]
        if not lo <= len(ops) <= hi:
            raise ParseError(f"{mnemonic} takes {lo}..{hi} operands, got {len(ops)}", lineno, source)
        if mnemonic == "OBSERVE":
            if not _LABEL.match(ops[0]):
                raise ParseError(f"bad label {ops[0]!r}", lineno, source)
            out.append(Observe(ops[0]))
            continue
        args = [_int(t, lineno, source) for t in ops]
        out.append(
            {
                "LOAD": Load,
                "STORE": Store,
                "COMPUTE": Compute,
                "SECRET_LOAD": SecretLoad,
                "SYSCALL": Syscall,
                "IO": Io,
                "HALT": Halt,
            }[mnemonic](*args)
        )
    return Program(tuple(out))


# -- prime and probe ---------------------------------------------------------


@dataclass(frozen=True)
class PrimeProbeConfig:
    """Layout of a prime-and-probe covert channel against one cache level.

    The spy's buffer holds ``ways * colours`` pages so that, with frames spread
    evenly over colours, every set of a probed group receives exactly one spy
    line per way.  Groups are identified by line offset within a page.
    """

    geometry: CacheGeometry
    width: int = 8
    level: str = "l1"
    sets_per_bit: int = 1
    first_set: int = 16
    spy_base: int = 0
    trojan_base: int = 0

    @property
    def lines_per_page(self) -> int:
        return min(self.geometry.page_size // self.geometry.line_size, sets_per_colour(self.geometry))

    @property
    def spy_pages(self) -> int:
        return self.geometry.ways * num_colours(self.geometry)

    @property
    def trojan_pages(self) -> int:
        return 1

    @property
    def warm_offset(self) -> int:
        return self.lines_per_page - 1

    def offsets(self, bit: int) -> range:
        start = self.first_set + bit * self.sets_per_bit
        return range(start, start + self.sets_per_bit)

    def validate(self) -> None:
        if self.level not in ("l1", "llc"):
            raise ConfigError(f"unknown prime-probe level {self.level!r}")
        if self.sets_per_bit < 1:
            raise ConfigError("sets_per_bit must be at least 1")
        if self.geometry.sets * self.geometry.line_size < self.geometry.page_size:
            raise ConfigError("target cache way is smaller than a page")
        end = self.first_set + self.width * self.sets_per_bit
        if end > self.warm_offset:
            raise ConfigError(
                f"{self.width} bits x {self.sets_per_bit} sets from set {self.first_set} "
                f"does not fit below set {self.warm_offset}"
            )


def gen_prime_probe(secret: Secret, cfg: PrimeProbeConfig) -> tuple[Program, Program]:
    """Build the (trojan, spy) pair; the spy is independent of the secret."""
    if secret.width != cfg.width:
        raise ConfigError(f"secret width {secret.width} != configured width {cfg.width}")
    cfg.validate()
    line, page = cfg.geometry.line_size, cfg.geometry.page_size

    trojan: list[Instruction] = []
    for bit in range(cfg.width):
        if secret.bit(bit):
            trojan.extend(Load(cfg.trojan_base + off * line) for off in cfg.offsets(bit))
    trojan.append(Halt())

    def spy_addr(p: int, off: int) -> int:
        return cfg.spy_base + p * page + off * line

    spy: list[Instruction] = []
    for bit in range(cfg.width):
        for off in cfg.offsets(bit):
            spy.extend(Load(spy_addr(p, off)) for p in range(cfg.spy_pages))
    spy.append(Halt())
    # warm the TLB on a line outside every probed group
    spy.extend(Load(spy_addr(p, cfg.warm_offset)) for p in range(cfg.spy_pages))
    spy.append(Observe("probe:start"))
    for bit in range(cfg.width):
        for off in cfg.offsets(bit):
            for p in range(cfg.spy_pages):
                spy.append(Load(spy_addr(p, off)))
                spy.append(Observe(f"probe:{off}:{p}"))
    spy.append(Halt())
    return Program(tuple(trojan)), Program(tuple(spy))


def probe_result(observations) -> ProbeResult:
    """Turn ``(time, label)`` observations into per-set probe latencies.

    The latency of a probe access is the gap to the preceding observation.
    """
    lat: dict[int, list[int]] = {}
    prev = None
    for time, label in observations:
        if label.startswith("probe:") and label != "probe:start" and prev is not None:
            off = int(label.split(":")[1])
            lat.setdefault(off, []).append(time - prev)
        prev = time
    return ProbeResult({k: tuple(v) for k, v in lat.items()})


def decode_probe(r: ProbeResult, cfg: PrimeProbeConfig, threshold: float) -> Secret:
    value = 0
    for bit in range(cfg.width):
        if any(x > threshold for off in cfg.offsets(bit) for x in r.latencies.get(off, ())):
            value |= 1 << bit
    return Secret(value, cfg.width)


# -- flush latency -------------------------------------------------------------


@dataclass(frozen=True)
class FlushChannelConfig:
    l1d: CacheGeometry
    width: int = 8
    base: int = 0

    @property
    def capacity(self) -> int:
        return self.l1d.lines

    @property
    def trojan_pages(self) -> int:
        span = self.l1d.ways * self.l1d.sets * self.l1d.line_size
        return max(1, -(-span // self.l1d.page_size))


def gen_flush_latency_channel(secret: Secret, cfg: FlushChannelConfig) -> tuple[Program, Program]:
    """Trojan dirties ``secret.value`` distinct L1D lines; observer timestamps its start."""
    if secret.value > cfg.capacity:
        raise ConfigError(f"secret {secret.value} exceeds {cfg.capacity} dirtiable lines")
    g = cfg.l1d
    way_span = g.sets * g.line_size
    stores = [
        Store(cfg.base + (j // g.sets) * way_span + (j % g.sets) * g.line_size)
        for j in range(secret.value)
    ]
    trojan = Program((*stores, Halt()))
    observer = Program((Observe("first"), Halt()))
    return trojan, observer


# -- downgrader ----------------------------------------------------------------


@dataclass(frozen=True)
class DowngraderFragment:
    """Hi side of a padded downgrader: a secret-dependent program plus its slice and pad."""

    program: Program
    slice: int
    pad: int


def gen_downgrader(
    secret: Secret, pad: int, work_per_unit: int = 1, base_work: int = 1
) -> DowngraderFragment:
    """Hi does ``base_work + secret * work_per_unit`` cycles of work in a one-cycle slice.

    ``base_work`` keeps the smallest secrets from being absorbed by the slice
    itself, so without padding every value is distinguishable.
    """
    if base_work < 1:
        raise ConfigError("base_work must be at least the one-cycle slice")
    worst = base_work + (2**secret.width - 1) * work_per_unit
    if pad < worst:
        raise ConfigError(f"pad {pad} is below the worst-case work {worst}")
    work = base_work + secret.value * work_per_unit
    # a one-cycle slice: the timer fires as soon as the work completes
    return DowngraderFragment(Program((Compute(work), Halt())), slice=1, pad=pad)


# -- interrupt channel ---------------------------------------------------------


@dataclass(frozen=True)
class IrqChannelConfig:
    irq: int
    lo_start: int
    width: int = 8
    spacing: int = 10
    margin: int = 5
    issue_time: int = 0

    def fire_time(self, value: int) -> int:
        return self.lo_start + self.margin + value * self.spacing


def gen_irq_channel(secret: Secret, cfg: IrqChannelConfig) -> tuple[Program, Program]:
    """Trojan arms a device interrupt to land in the observer's tick ``secret``."""
    if not 0 < cfg.margin < cfg.spacing:
        raise ConfigError("margin must fall strictly inside a tick")
    delay = cfg.fire_time(secret.value) - cfg.issue_time
    if delay < 0:
        raise ConfigError("interrupt would fire before it is requested")
    trojan = Program((Io(cfg.irq, delay), Halt()))
    ticks: list[Instruction] = [Observe("tick:start")]
    for j in range(2**cfg.width):
        ticks += [Compute(cfg.spacing), Observe(f"tick:{j}")]
    ticks.append(Halt())
    return trojan, Program(tuple(ticks))


def decode_irq_ticks(observations, cfg: IrqChannelConfig) -> Secret:
    """First tick whose duration exceeds the nominal spacing; 0 if none does."""
    ticks = [(t, lab) for t, lab in observations if lab.startswith("tick:")]
    for (t0, _), (t1, lab) in zip(ticks, ticks[1:]):
        if t1 - t0 > cfg.spacing:
            return Secret(int(lab.split(":")[1]), cfg.width)
    return Secret(0, cfg.width)


# -- kernel-image (syscall) channel ------------------------------------------


@dataclass(frozen=True)
class SyscallChannelConfig:
    width: int = 8
    first_syscall: int = 0


def gen_syscall_channel(secret: Secret, cfg: SyscallChannelConfig) -> tuple[Program, Program]:
    """Trojan issues syscall ``i`` for each set bit; observer times every syscall once."""
    trojan = [Syscall(cfg.first_syscall + i) for i in range(cfg.width) if secret.bit(i)]
    trojan.append(Halt())
    obs: list[Instruction] = [Observe("sys:start")]
    for i in range(cfg.width):
        obs += [Syscall(cfg.first_syscall + i), Observe(f"sys:{i}")]
    obs.append(Halt())
    return Program(tuple(trojan)), Program(tuple(obs))


def syscall_durations(observations, cfg: SyscallChannelConfig) -> list[int]:
    """Duration of each timed syscall, in call order, up to the first missing one."""
    times = {lab: t for t, lab in observations if lab.startswith("sys:")}
    out = []
    prev = times.get("sys:start")
    for i in range(cfg.width):
        t = times.get(f"sys:{i}")
        if t is None or prev is None:
            break
        out.append(t - prev)
        prev = t
    return out


def decode_syscall_timings(observations, cfg: SyscallChannelConfig, threshold) -> Secret:
    """Bit ``i`` is set when syscall ``i`` ran faster than ``threshold``.

    ``threshold`` is a single cycle count or one per call.
    """
    if isinstance(threshold, (int, float)):
        threshold = [threshold] * cfg.width
    value = 0
    for i, (d, thr) in enumerate(zip(syscall_durations(observations, cfg), threshold)):
        if d < thr:
            value |= 1 << i
    return Secret(value, cfg.width)
