"""Abstract microarchitectural state: caches, TLB and branch predictor.

Every component is a frozen value; operations return a new state instead of
mutating.  Components are classified as either *flushable* (core-local,
reset on a domain switch) or *partitionable* (shared, divided by page
colour).
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from typing import NamedTuple

__all__ = [
    "CacheGeometry",
    "Line",
    "CacheState",
    "CacheAccess",
    "TlbEntry",
    "TlbState",
    "PredictorState",
    "MicroArchState",
    "set_index",
    "num_colours",
    "colour_of_frame",
    "sets_per_colour",
    "llc_sets_of_colour",
    "cache_access",
    "cache_flush",
    "tlb_access",
    "tlb_invalidate_asid",
    "predict",
    "flush_flushable",
    "default_march",
]


def evolve(obj, **changes):
    """``dataclasses.replace`` without re-running validation, for hot paths."""
    new = object.__new__(type(obj))
    d = new.__dict__
    d.update(obj.__dict__)
    d.update(changes)
    return new


def _is_pow2(n: int) -> bool:
    return n > 0 and n & (n - 1) == 0


@dataclass(frozen=True)
class CacheGeometry:
    sets: int
    ways: int
    line_size: int = 64
    page_size: int = 4096

    def __post_init__(self):
        for name in ("sets", "ways", "line_size", "page_size"):
            if not _is_pow2(getattr(self, name)):
                raise ValueError(f"{name} must be a power of two, got {getattr(self, name)}")
        if self.line_size > self.page_size:
            raise ValueError("line_size must not exceed page_size")

    @property
    def capacity(self) -> int:
        """Size in bytes."""
        return self.sets * self.ways * self.line_size

    @property
    def lines(self) -> int:
        return self.sets * self.ways


class Line(NamedTuple):
    tag: int
    valid: bool
    dirty: bool
    lru_rank: int  # 0 is most recently used; -1 for invalid ways


_INVALID = Line(0, False, False, -1)


class CacheAccess(NamedTuple):
    hit: bool
    evicted_dirty: bool
    state: "CacheState"


@dataclass(frozen=True)
class CacheState:
    geometry: CacheGeometry
    lines: tuple[tuple[Line, ...], ...]

    @classmethod
    def empty(cls, geometry: CacheGeometry) -> "CacheState":
        ways = (_INVALID,) * geometry.ways
        return cls(geometry, (ways,) * geometry.sets)

    def valid_lines(self) -> int:
        return sum(w.valid for ways in self.lines for w in ways)

    def dirty_lines(self) -> int:
        return sum(w.dirty for ways in self.lines for w in ways)

    def contains(self, addr: int) -> bool:
        g = self.geometry
        line = addr // g.line_size
        tag = line // g.sets
        return any(w.valid and w.tag == tag for w in self.lines[line % g.sets])


def set_index(addr: int, geom: CacheGeometry) -> int:
    return (addr // geom.line_size) % geom.sets


def num_colours(geom: CacheGeometry) -> int:
    return max(1, geom.sets * geom.line_size // geom.page_size)


def colour_of_frame(frame: int, geom: CacheGeometry) -> int:
    return frame % num_colours(geom)


def sets_per_colour(geom: CacheGeometry) -> int:
    return geom.sets // num_colours(geom)


def llc_sets_of_colour(colour: int, geom: CacheGeometry) -> range:
    """Contiguous range of set ordinals reachable from pages of ``colour``."""
    n = num_colours(geom)
    if not 0 <= colour < n:
        raise ValueError(f"colour {colour} out of range for {n} colours")
    width = sets_per_colour(geom)
    return range(colour * width, (colour + 1) * width)


def cache_access(c: CacheState, addr: int, kind: str = "read") -> CacheAccess:
    """Look up ``addr``; on a miss install it over the LRU way.

    Write-back, write-allocate: writes mark the line dirty and a dirty victim
    is reported through ``evicted_dirty``.
    """
    if kind not in ("read", "write"):
        raise ValueError(f"unknown access kind {kind!r}")
    g = c.geometry
    line = addr // g.line_size
    s = line % g.sets
    tag = line // g.sets
    ways = c.lines[s]
    write = kind == "write"

    for i, w in enumerate(ways):
        if w.valid and w.tag == tag:
            rank = w.lru_rank
            new = [
                Line(x.tag, True, x.dirty, x.lru_rank + 1) if x.valid and x.lru_rank < rank else x
                for x in ways
            ]
            new[i] = Line(tag, True, w.dirty or write, 0)
            return CacheAccess(True, False, _with_set(c, s, tuple(new)))

    victim = next((i for i, w in enumerate(ways) if not w.valid), None)
    if victim is None:
        victim = max(range(len(ways)), key=lambda i: ways[i].lru_rank)
    evicted_dirty = ways[victim].valid and ways[victim].dirty
    new = [Line(x.tag, True, x.dirty, x.lru_rank + 1) if x.valid else x for x in ways]
    new[victim] = Line(tag, True, write, 0)
    return CacheAccess(False, evicted_dirty, _with_set(c, s, tuple(new)))


def _with_set(c: CacheState, s: int, ways: tuple[Line, ...]) -> CacheState:
    lines = c.lines
    return evolve(c, lines=lines[:s] + (ways,) + lines[s + 1 :])


def cache_flush(c: CacheState) -> tuple[int, CacheState]:
    """Invalidate everything; returns the number of dirty lines written back."""
    return c.dirty_lines(), CacheState.empty(c.geometry)


class TlbEntry(NamedTuple):
    asid: int
    vpn: int
    valid: bool
    lru_rank: int


_NO_ENTRY = TlbEntry(0, 0, False, -1)


@dataclass(frozen=True)
class TlbState:
    """Set-associative TLB tagged by (asid, vpn); the set is ``vpn mod sets``."""

    geometry: CacheGeometry
    entries: tuple[tuple[TlbEntry, ...], ...]

    @classmethod
    def empty(cls, geometry: CacheGeometry) -> "TlbState":
        if geometry.line_size != geometry.page_size:
            raise ValueError("TLB geometry needs line_size == page_size")
        return cls(geometry, ((_NO_ENTRY,) * geometry.ways,) * geometry.sets)

    def valid_keys(self, asid: int | None = None) -> frozenset[tuple[int, int]]:
        return frozenset(
            (e.asid, e.vpn)
            for ways in self.entries
            for e in ways
            if e.valid and (asid is None or e.asid == asid)
        )


def tlb_access(t: TlbState, asid: int, vpn: int) -> tuple[bool, TlbState]:
    s = vpn % t.geometry.sets
    ways = t.entries[s]
    for i, e in enumerate(ways):
        if e.valid and e.asid == asid and e.vpn == vpn:
            rank = e.lru_rank
            new = [
                TlbEntry(x.asid, x.vpn, True, x.lru_rank + 1) if x.valid and x.lru_rank < rank else x
                for x in ways
            ]
            new[i] = TlbEntry(asid, vpn, True, 0)
            return True, _tlb_with_set(t, s, tuple(new))
    victim = next((i for i, e in enumerate(ways) if not e.valid), None)
    if victim is None:
        victim = max(range(len(ways)), key=lambda i: ways[i].lru_rank)
    new = [TlbEntry(x.asid, x.vpn, True, x.lru_rank + 1) if x.valid else x for x in ways]
    new[victim] = TlbEntry(asid, vpn, True, 0)
    return False, _tlb_with_set(t, s, tuple(new))


def tlb_invalidate_asid(t: TlbState, asid: int) -> TlbState:
    """Drop every entry of ``asid``; other address spaces are untouched."""
    sets = []
    for ways in t.entries:
        keep = sorted((e for e in ways if e.valid and e.asid != asid), key=lambda e: e.lru_rank)
        ranked = [e._replace(lru_rank=r) for r, e in enumerate(keep)]
        sets.append(tuple(ranked) + (_NO_ENTRY,) * (len(ways) - len(ranked)))
    return TlbState(t.geometry, tuple(sets))


def _tlb_with_set(t: TlbState, s: int, ways: tuple[TlbEntry, ...]) -> TlbState:
    entries = t.entries
    return evolve(t, entries=entries[:s] + (ways,) + entries[s + 1 :])


@dataclass(frozen=True)
class PredictorState:
    """Direct-mapped table of (tag, valid) indexed by low program-counter bits."""

    table: tuple[tuple[int, bool], ...]

    @classmethod
    def empty(cls, size: int = 64) -> "PredictorState":
        if not _is_pow2(size):
            raise ValueError("predictor size must be a power of two")
        return cls(((0, False),) * size)

    def valid_entries(self) -> int:
        return sum(v for _, v in self.table)


def predict(p: PredictorState, pc: int) -> tuple[bool, PredictorState]:
    """Consult the entry for ``pc``; a mispredict trains the entry."""
    size = len(p.table)
    idx, tag = pc % size, pc // size
    if p.table[idx] == (tag, True):
        return True, p
    table = list(p.table)
    table[idx] = (tag, True)
    return False, PredictorState(tuple(table))


@dataclass(frozen=True)
class MicroArchState:
    l1i: CacheState
    l1d: CacheState
    tlb: TlbState
    predictor: PredictorState
    llc: CacheState

    FLUSHABLE = ("l1i", "l1d", "tlb", "predictor")
    PARTITIONABLE = ("llc",)

    @classmethod
    def empty(
        cls,
        l1: CacheGeometry,
        llc: CacheGeometry,
        tlb: CacheGeometry,
        predictor_size: int = 64,
    ) -> "MicroArchState":
        return cls(
            l1i=CacheState.empty(l1),
            l1d=CacheState.empty(l1),
            tlb=TlbState.empty(tlb),
            predictor=PredictorState.empty(predictor_size),
            llc=CacheState.empty(llc),
        )

    @classmethod
    def component_names(cls) -> tuple[str, ...]:
        return tuple(f.name for f in fields(cls))

    def flushable_valid_entries(self) -> int:
        return (
            self.l1i.valid_lines()
            + self.l1d.valid_lines()
            + len(self.tlb.valid_keys())
            + self.predictor.valid_entries()
        )


def flush_flushable(m: MicroArchState) -> tuple[int, MicroArchState]:
    """Reset all core-local state.  Only L1D write-backs are counted."""
    dirty, l1d = cache_flush(m.l1d)
    _, l1i = cache_flush(m.l1i)
    return dirty, evolve(
        m,
        l1i=l1i,
        l1d=l1d,
        tlb=TlbState.empty(m.tlb.geometry),
        predictor=PredictorState.empty(len(m.predictor.table)),
    )


DEFAULT_L1 = CacheGeometry(sets=64, ways=4, line_size=64, page_size=4096)
DEFAULT_LLC = CacheGeometry(sets=1024, ways=8, line_size=64, page_size=4096)
DEFAULT_TLB = CacheGeometry(sets=16, ways=4, line_size=4096, page_size=4096)


def default_march() -> MicroArchState:
    return MicroArchState.empty(DEFAULT_L1, DEFAULT_LLC, DEFAULT_TLB)
