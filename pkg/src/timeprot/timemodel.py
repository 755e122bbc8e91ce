"""Virtual time: a cycle counter and a latency function of microarchitectural outcomes."""

from __future__ import annotations

import enum
from dataclasses import dataclass, fields
from typing import NamedTuple

__all__ = [
    "Level",
    "AccessOutcome",
    "TimeModelParams",
    "Clock",
    "access_latency",
    "flush_latency",
    "advance",
]


class Level(enum.Enum):
    L1 = "l1"
    LLC = "llc"
    MEM = "mem"


class AccessOutcome(NamedTuple):
    level: Level
    tlb_hit: bool = True


@dataclass(frozen=True)
class TimeModelParams:
    l1_hit: int = 1
    llc_hit: int = 12
    mem: int = 100
    predict_ok: int = 1
    mispredict: int = 15
    tlb_miss_penalty: int = 30
    flush_base: int = 20
    writeback_per_line: int = 10
    kernel_entry: int = 50
    kernel_exit: int = 50

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not isinstance(v, int) or isinstance(v, bool) or v < 0:
                raise ValueError(f"{f.name} must be a non-negative integer, got {v!r}")
        if not self.l1_hit <= self.llc_hit <= self.mem:
            raise ValueError("latencies must satisfy l1_hit <= llc_hit <= mem")


@dataclass(frozen=True)
class Clock:
    now: int = 0


def access_latency(p: TimeModelParams, outcome: AccessOutcome) -> int:
    """Latency of the level that hit (flat), plus the TLB miss penalty if any."""
    level, tlb_hit = outcome
    base = {Level.L1: p.l1_hit, Level.LLC: p.llc_hit, Level.MEM: p.mem}[level]
    return base + (0 if tlb_hit else p.tlb_miss_penalty)


def flush_latency(p: TimeModelParams, dirty_count: int) -> int:
    return p.flush_base + dirty_count * p.writeback_per_line


def advance(c: Clock, d: int) -> Clock:
    if d < 0:
        raise ValueError("time cannot run backwards")
    return Clock(c.now + d)
