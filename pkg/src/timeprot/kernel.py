"""Miniature protection kernel.

Coloured frame allocation, per-domain kernel clones, round-robin scheduling
with flush-and-pad domain switches, and partitioned interrupt delivery, on a
single time-multiplexed core.  A :class:`Machine` is an immutable value;
:func:`step` returns the successor machine and the events it emitted.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import NamedTuple

from . import march as ma
from .errors import AccessFault, ColourExhausted, ConfigError, PadOverrun, UnknownIrq, ValidationError
from .march import CacheGeometry, MicroArchState, evolve, num_colours
from .timemodel import AccessOutcome, Level, TimeModelParams, access_latency, flush_latency
from .workloads import Compute, Halt, Io, Load, Observe, Program, SecretLoad, Store, Syscall

__all__ = [
    "KERNEL_DATA_LINES",
    "SWITCH_LINE",
    "IRQ_LINE",
    "IO_LINE",
    "SYSCALL_BASE",
    "MECHANISMS",
    "Protections",
    "Hardware",
    "Domain",
    "FrameAllocator",
    "Event",
    "Context",
    "Machine",
    "alloc_frame",
    "boot",
    "kernel_clone",
    "kernel_image_of",
    "step",
    "domain_switch",
    "irq_schedule",
    "switch_bound",
    "trap_bound",
    "max_step_latency",
    "safe_pad",
    "validate_config",
]

KERNEL_DATA_LINES = 4

# line offsets of handler text within a kernel image page
SWITCH_LINE = 0
IRQ_LINE = 1
IO_LINE = 2
SYSCALL_BASE = 3

KERNEL_OWNER = -1

MECHANISMS = {
    "flush": "flush_on_switch",
    "colour": "colour_partitioning",
    "clone": "kernel_clone",
    "pad": "pad_enabled",
    "irq": "irq_partitioning",
}


@dataclass(frozen=True)
class Protections:
    flush_on_switch: bool = True
    colour_partitioning: bool = True
    kernel_clone: bool = True
    pad_enabled: bool = True
    irq_partitioning: bool = True

    def without(self, *mechanisms: str) -> "Protections":
        """Disable mechanisms by short name (``flush``, ``colour``, ...) or field name."""
        changes = {}
        for name in mechanisms:
            key = MECHANISMS.get(name, name)
            if key not in MECHANISMS.values():
                raise ConfigError(f"unknown mechanism {name!r}; expected one of {sorted(MECHANISMS)}")
            changes[key] = False
        return replace(self, **changes)


@dataclass(frozen=True)
class Hardware:
    l1: CacheGeometry = ma.DEFAULT_L1
    llc: CacheGeometry = ma.DEFAULT_LLC
    tlb: CacheGeometry = ma.DEFAULT_TLB
    predictor_size: int = 64
    memory: int = 4 * 1024 * 1024
    params: TimeModelParams = field(default_factory=TimeModelParams)
    kernel_colours: frozenset[int] | None = None

    @property
    def page_size(self) -> int:
        return self.llc.page_size

    @property
    def frames(self) -> int:
        return self.memory // self.page_size

    @property
    def colours(self) -> int:
        return num_colours(self.llc)

    def reserved_colours(self) -> frozenset[int]:
        """Colours holding kernel global data (and the shared image when not cloning)."""
        if self.kernel_colours is not None:
            return self.kernel_colours
        return frozenset({self.colours - 1})


@dataclass(frozen=True)
class Domain:
    id: int
    colours: frozenset[int]
    slice: int
    pad: int
    program: Program = Program()
    irqs: frozenset[int] = frozenset()
    kernel_image: tuple[int, ...] = ()
    pages: int = 1
    filler: Program | None = None
    filler_margin: int = 0
    name: str = ""

    def __post_init__(self):
        if self.slice < 1:
            raise ConfigError(f"domain {self.id}: slice must be at least 1 cycle")
        if self.pad < 0:
            raise ConfigError(f"domain {self.id}: pad must be non-negative")
        if self.pages < 0:
            raise ConfigError(f"domain {self.id}: pages must be non-negative")


# -- frame allocation ----------------------------------------------------------


@dataclass(frozen=True)
class FrameAllocator:
    free: tuple[tuple[int, ...], ...]  # per colour, ascending
    log: tuple[tuple[int, int], ...] = ()  # (frame, owner)

    @classmethod
    def create(cls, frames: int, geom: CacheGeometry) -> "FrameAllocator":
        n = num_colours(geom)
        return cls(tuple(tuple(range(c, frames, n)) for c in range(n)))

    @property
    def ncolours(self) -> int:
        return len(self.free)

    def take(self, colours, owner: int) -> tuple[int, "FrameAllocator"]:
        """Lowest free frame whose colour is in ``colours`` (``None`` means any)."""
        pool = range(self.ncolours) if colours is None else sorted(colours)
        best = None
        for c in pool:
            if 0 <= c < self.ncolours and self.free[c] and (best is None or self.free[c][0] < self.free[best][0]):
                best = c
        if best is None:
            raise ColourExhausted(f"no free frame in colours {sorted(pool)} for owner {owner}")
        frame = self.free[best][0]
        free = list(self.free)
        free[best] = free[best][1:]
        return frame, FrameAllocator(tuple(free), self.log + ((frame, owner),))

    def frames_of(self, owner: int) -> list[int]:
        return [f for f, o in self.log if o == owner]


def alloc_frame(a: FrameAllocator, d: Domain, partitioned: bool = True) -> tuple[int, FrameAllocator]:
    return a.take(d.colours if partitioned else None, d.id)


# -- machine -------------------------------------------------------------------


class Event(NamedTuple):
    time: int
    domain: int
    kind: str
    detail: object = None


@dataclass(frozen=True)
class Context:
    pc: int = 0
    waiting: bool = False  # executed HALT; idle until the next slice
    filler_pc: int = 0


@dataclass(frozen=True)
class Machine:
    clock: int
    march: MicroArchState
    params: TimeModelParams
    hardware: Hardware
    domains: tuple[Domain, ...]
    contexts: tuple[Context, ...]
    protections: Protections
    allocator: FrameAllocator
    page_tables: tuple[tuple[int, ...], ...]
    kernel_data: tuple[int, ...]  # physical addresses of global kernel data lines
    shared_image: tuple[int, ...]
    current: int = 0
    slice_start: int = 0
    pending_irqs: tuple[tuple[int, int], ...] = ()  # (fire time, irq), sorted
    secret: int = 0
    steps: int = 0
    halted: bool = False

    def finished(self, d: int) -> bool:
        return self.contexts[d].pc >= len(self.domains[d].program)

    def all_finished(self) -> bool:
        return all(self.finished(d) for d in range(len(self.domains)))

    def owner_of(self, irq: int) -> int | None:
        for d in self.domains:
            if irq in d.irqs:
                return d.id
        return None

    def deadline(self) -> int:
        return self.slice_start + self.domains[self.current].slice


def kernel_image_of(m: Machine, d: int) -> tuple[int, ...]:
    """Frames holding the kernel text used on behalf of domain ``d``."""
    image = m.domains[d].kernel_image
    return image if image else m.shared_image


def kernel_clone(m: Machine, d: int) -> Machine:
    """Give domain ``d`` a private kernel image in its own colours."""
    dom = m.domains[d]
    frame, alloc = m.allocator.take(
        dom.colours if m.protections.colour_partitioning else None, dom.id
    )
    domains = list(m.domains)
    domains[d] = replace(dom, kernel_image=(frame,))
    return replace(m, allocator=alloc, domains=tuple(domains))


def validate_config(hw: Hardware, domains: tuple[Domain, ...], prot: Protections) -> None:
    if not domains:
        raise ValidationError("at least one domain is required")
    if [d.id for d in domains] != list(range(len(domains))):
        raise ValidationError("domain ids must be 0..n-1 in order")
    irqs: dict[int, int] = {}
    for d in domains:
        for i in d.irqs:
            if i in irqs:
                raise ValidationError(f"irq {i} owned by domains {irqs[i]} and {d.id}")
            irqs[i] = d.id
        bad = [c for c in d.colours if not 0 <= c < hw.colours]
        if bad:
            raise ValidationError(f"domain {d.id}: colours {bad} out of range (0..{hw.colours - 1})")
    if prot.colour_partitioning:
        reserved = hw.reserved_colours()
        seen: dict[int, int] = {}
        for d in domains:
            if not d.colours:
                raise ValidationError(f"domain {d.id}: no colours assigned")
            for c in d.colours:
                if c in reserved:
                    raise ValidationError(f"domain {d.id}: colour {c} is reserved for the kernel")
                if c in seen:
                    raise ValidationError(f"colour {c} assigned to domains {seen[c]} and {d.id}")
                seen[c] = d.id


def boot(hw: Hardware, domains, protections: Protections = Protections(), secret: int = 0) -> Machine:
    """Allocate kernel and user memory and return a machine ready to run domain 0."""
    domains = tuple(domains)
    validate_config(hw, domains, protections)
    part = protections.colour_partitioning
    alloc = FrameAllocator.create(hw.frames, hw.llc)
    kcols = hw.reserved_colours() if part else None

    data_frame, alloc = alloc.take(kcols, KERNEL_OWNER)
    line = hw.llc.line_size
    kernel_data = tuple(data_frame * hw.page_size + i * line for i in range(KERNEL_DATA_LINES))
    shared: tuple[int, ...] = ()
    if not protections.kernel_clone:
        frame, alloc = alloc.take(kcols, KERNEL_OWNER)
        shared = (frame,)

    m = Machine(
        clock=0,
        march=MicroArchState.empty(hw.l1, hw.llc, hw.tlb, hw.predictor_size),
        params=hw.params,
        hardware=hw,
        domains=domains,
        contexts=tuple(Context() for _ in domains),
        protections=protections,
        allocator=alloc,
        page_tables=(),
        kernel_data=kernel_data,
        shared_image=shared,
        secret=secret,
    )
    tables = []
    for d in domains:
        if protections.kernel_clone:
            m = kernel_clone(m, d.id)
        alloc = m.allocator
        frames = []
        for _ in range(d.pages):
            f, alloc = alloc_frame(alloc, d, part)
            frames.append(f)
        tables.append(tuple(frames))
        m = replace(m, allocator=alloc)
    return replace(m, page_tables=tuple(tables))


# -- memory paths --------------------------------------------------------------


def _cache_path(march_: MicroArchState, paddr: int, kind: str, instr: bool) -> tuple[Level, MicroArchState]:
    l1 = march_.l1i if instr else march_.l1d
    r = ma.cache_access(l1, paddr, kind)
    march_ = evolve(march_, l1i=r.state) if instr else evolve(march_, l1d=r.state)
    if r.hit:
        return Level.L1, march_
    r2 = ma.cache_access(march_.llc, paddr, "read")
    return (Level.LLC if r2.hit else Level.MEM), evolve(march_, llc=r2.state)


def _user_access(m: Machine, d: int, vaddr: int, kind: str) -> tuple[int, MicroArchState]:
    page = m.hardware.page_size
    vpn, off = divmod(vaddr, page)
    table = m.page_tables[d]
    if vpn >= len(table):
        raise AccessFault(f"domain {d}: access to unmapped address {vaddr:#x}")
    tlb_hit, tlb = ma.tlb_access(m.march.tlb, d, vpn)
    level, march_ = _cache_path(evolve(m.march, tlb=tlb), table[vpn] * page + off, kind, False)
    return access_latency(m.params, AccessOutcome(level, tlb_hit)), march_


def _kernel_path(m: Machine, march_: MicroArchState, d: int, handler_line: int) -> tuple[int, MicroArchState]:
    """Dispatch to a handler in ``d``'s kernel image and touch global data.

    Covers branch prediction of the dispatch, the handler's text line and the
    global kernel data lines in fixed order.  Kernel accesses are physical.
    """
    p = m.params
    line = m.hardware.l1.line_size
    text = kernel_image_of(m, d)[0] * m.hardware.page_size + handler_line * line
    ok, pred = ma.predict(march_.predictor, text // line)
    lat = p.predict_ok if ok else p.mispredict
    level, march_ = _cache_path(evolve(march_, predictor=pred), text, "read", True)
    lat += access_latency(p, AccessOutcome(level))
    for addr in m.kernel_data:
        level, march_ = _cache_path(march_, addr, "read", False)
        lat += access_latency(p, AccessOutcome(level))
    return lat, march_


def trap_bound(p: TimeModelParams) -> int:
    """Worst-case duration of one syscall, I/O request or interrupt delivery."""
    return p.kernel_entry + max(p.predict_ok, p.mispredict) + (1 + KERNEL_DATA_LINES) * p.mem + p.kernel_exit


def switch_bound(hw: Hardware) -> int:
    """Worst-case switch work once the preemption timer has been taken."""
    p = hw.params
    return trap_bound(p) + flush_latency(p, hw.l1.lines)


def max_step_latency(program: Program, p: TimeModelParams) -> int:
    """Longest single step a domain running ``program`` can have in flight."""
    worst = trap_bound(p)  # an interrupt delivery can always be in flight
    for ins in program:
        if isinstance(ins, Compute):
            worst = max(worst, ins.cycles)
        elif isinstance(ins, (Load, Store, SecretLoad)):
            worst = max(worst, p.mem + p.tlb_miss_penalty)
    return worst


def safe_pad(hw: Hardware, program: Program) -> int:
    """A pad no switch away from a domain running ``program`` can exceed.

    Worst in-flight step at timer expiry plus the full switch path, so that a
    switch can never overrun it under this time model.
    """
    return max_step_latency(program, hw.params) + switch_bound(hw)


# -- interrupts ----------------------------------------------------------------


def irq_schedule(m: Machine, irq: int, fire: int) -> Machine:
    if m.owner_of(irq) is None:
        raise UnknownIrq(f"no domain owns irq {irq}")
    return evolve(m, pending_irqs=tuple(sorted(m.pending_irqs + ((fire, irq),))))


def _deliverable(m: Machine) -> list[tuple[int, int]]:
    if not m.protections.irq_partitioning:
        return list(m.pending_irqs)
    return [(t, i) for t, i in m.pending_irqs if m.owner_of(i) == m.current]


# -- execution -----------------------------------------------------------------


def _execute(m: Machine, d: int, ins, march_: MicroArchState, clock: int):
    """Run one user instruction of domain ``d`` starting at ``clock``.

    Returns (clock', march', events, extra machine updates).
    """
    p = m.params
    if isinstance(ins, Compute):
        clock += ins.cycles
        return clock, march_, [Event(clock, d, "instruction-retired", ins.cycles)], {}
    if isinstance(ins, Observe):
        return clock, march_, [Event(clock, d, "observe", ins.label)], {}
    if isinstance(ins, (Load, Store, SecretLoad)):
        if isinstance(ins, SecretLoad):
            vaddr, kind = ins.base + m.secret * ins.stride, "read"
        else:
            vaddr, kind = ins.vaddr, ("write" if isinstance(ins, Store) else "read")
        lat, march_ = _user_access(evolve(m, march=march_), d, vaddr, kind)
        clock += lat
        return clock, march_, [Event(clock, d, "instruction-retired", lat)], {}
    if isinstance(ins, (Syscall, Io)):
        start = clock
        if isinstance(ins, Syscall):
            handler, detail = SYSCALL_BASE + ins.number, ins.number
            if handler >= m.hardware.page_size // m.hardware.l1.line_size:
                raise ConfigError(f"syscall number {ins.number} outside the kernel image")
        else:
            handler, detail = IO_LINE, f"io:{ins.irq}"
        lat, march_ = _kernel_path(m, march_, d, handler)
        lat += p.kernel_entry + p.kernel_exit
        clock += lat
        extra = {}
        if isinstance(ins, Io):
            extra["pending_irqs"] = irq_schedule(m, ins.irq, start + ins.delay).pending_irqs
        events = [Event(start, d, "syscall-enter", detail), Event(clock, d, "syscall-exit", lat)]
        return clock, march_, events, extra
    if isinstance(ins, Halt):
        return clock, march_, [Event(clock, d, "instruction-retired", 0)], {}
    raise TypeError(f"not an instruction: {ins!r}")


def _deliver_irq(m: Machine, fire: int, irq: int) -> tuple[Machine, list[Event]]:
    p = m.params
    d = m.current
    pending = list(m.pending_irqs)
    pending.remove((fire, irq))
    t = m.clock + p.kernel_entry
    events = [Event(t, d, "irq-delivered", irq)]
    lat, march_ = _kernel_path(m, m.march, d, IRQ_LINE)
    clock = t + lat + p.kernel_exit
    return evolve(m, clock=clock, march=march_, pending_irqs=tuple(pending), steps=m.steps + 1), events


def _run_filler(m: Machine, until: int) -> tuple[Machine, list[Event]]:
    """Run the switched-from domain's filler program until ``until``."""
    d = m.current
    filler = m.domains[d].filler
    ctx = m.contexts[d]
    fpc, clock, march_ = ctx.filler_pc, m.clock, m.march
    events: list[Event] = []
    extra: dict = {}
    while clock < until and fpc < len(filler):
        ins = filler[fpc]
        if isinstance(ins, Halt):
            break
        clock, march_, evs, more = _execute(evolve(m, **extra), d, ins, march_, clock)
        extra.update(more)
        events += evs
        fpc += 1
    clock = max(clock, until)
    contexts = list(m.contexts)
    contexts[d] = evolve(ctx, filler_pc=fpc)
    return evolve(m, clock=clock, march=march_, contexts=tuple(contexts), **extra), events


def domain_switch(m: Machine) -> tuple[Machine, list[Event]]:
    """Preemption-timer path: optional filler, global data, flush, pad, hand over."""
    p = m.params
    prot = m.protections
    prev = m.current
    dom = m.domains[prev]
    events = [Event(m.clock, prev, "switch-begin", None)]
    deadline = m.slice_start + dom.slice + dom.pad

    if prot.pad_enabled and dom.filler is not None:
        m, evs = _run_filler(m, deadline - dom.filler_margin)
        events += evs

    clock = m.clock + p.kernel_entry
    text_line = kernel_image_of(m, prev)[0] * m.hardware.page_size + SWITCH_LINE * m.hardware.l1.line_size
    line = m.hardware.l1.line_size
    ok, pred = ma.predict(m.march.predictor, text_line // line)
    clock += p.predict_ok if ok else p.mispredict
    level, march_ = _cache_path(evolve(m.march, predictor=pred), text_line, "read", True)
    clock += access_latency(p, AccessOutcome(level))
    # every line dirty on entry is written back during the switch, by eviction or by the flush
    dirty = march_.l1d.dirty_lines()
    for addr in m.kernel_data:
        level, march_ = _cache_path(march_, addr, "read", False)
        clock += access_latency(p, AccessOutcome(level))
    # flush last so the next domain starts from empty core-local state
    if prot.flush_on_switch:
        _, march_ = ma.flush_flushable(march_)
        clock += flush_latency(p, dirty)
    clock += p.kernel_exit

    if prot.pad_enabled:
        if clock > deadline:
            raise PadOverrun(prev, deadline, clock)
        clock = deadline

    nxt = (prev + 1) % len(m.domains)
    contexts = list(m.contexts)
    contexts[nxt] = evolve(contexts[nxt], waiting=False)
    events.append(Event(clock, nxt, "switch-end", prev))
    return (
        evolve(
            m,
            clock=clock,
            march=march_,
            current=nxt,
            slice_start=clock,
            contexts=tuple(contexts),
            steps=m.steps + 1,
        ),
        events,
    )


def step(m: Machine) -> tuple[Machine, list[Event]]:
    """Advance by exactly one action: timer, interrupt, idle, or user instruction."""
    if m.halted:
        raise RuntimeError("machine has halted")
    if not m.pending_irqs and m.all_finished():
        return evolve(m, halted=True), []

    d = m.current
    deadline = m.deadline()
    if m.clock >= deadline:
        return domain_switch(m)

    due = [(t, i) for t, i in _deliverable(m) if t <= m.clock]
    if due:
        return _deliver_irq(m, *due[0])

    ctx = m.contexts[d]
    if ctx.waiting or m.finished(d):
        upcoming = [t for t, _ in _deliverable(m) if t < deadline]
        target = min(upcoming) if upcoming else deadline
        return evolve(m, clock=max(target, m.clock), steps=m.steps + 1), []

    ins = m.domains[d].program[ctx.pc]
    clock, march_, events, extra = _execute(m, d, ins, m.march, m.clock)
    contexts = list(m.contexts)
    contexts[d] = evolve(ctx, pc=ctx.pc + 1, waiting=isinstance(ins, Halt))
    return (
        evolve(m, clock=clock, march=march_, contexts=tuple(contexts), steps=m.steps + 1, **extra),
        events,
    )
