"""Acceptance gate: one test per criterion, each printing a PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -s`` to see the lines inline;
they are also repeated in the terminal summary.
"""

import math
import random
import time
from contextlib import contextmanager

import numpy as np
import pytest

from timeprot.cli import parse_scenario, shipped_scenarios
from timeprot.harness import (
    DESIGNATED,
    ChannelMatrix,
    attack_demo,
    channel_matrix,
    check_ni,
    compare_views,
    lo_views,
    mutual_information,
    run,
)
from timeprot.march import (
    DEFAULT_LLC,
    CacheGeometry,
    CacheState,
    cache_access,
    colour_of_frame,
    llc_sets_of_colour,
    num_colours,
    set_index,
)

from .lru_reference import ReferenceCache

RESULTS: list[str] = []


@contextmanager
def criterion(n: int, title: str, budget_s: float):
    t0 = time.perf_counter()
    try:
        yield
        elapsed = time.perf_counter() - t0
        assert elapsed < budget_s, f"took {elapsed:.1f}s, budget {budget_s}s"
    except BaseException as e:
        line = f"FAIL criterion {n}: {title} ({type(e).__name__}: {e})"
        RESULTS.append(line)
        print(line)
        raise
    line = f"PASS criterion {n}: {title} ({elapsed:.2f}s)"
    RESULTS.append(line)
    print(line)


def scenario(name):
    return parse_scenario(shipped_scenarios()[name])


# -- 1 ----------------------------------------------------------------------------------


def test_criterion_1_colour_count():
    with criterion(1, "8192-set LLC has 128 colours partitioning every set", 1.0):
        g = CacheGeometry(sets=8192, ways=16, line_size=64, page_size=4096)
        n = num_colours(g)
        assert n == 128 and n >= 64
        covered = [s for c in range(n) for s in llc_sets_of_colour(c, g)]
        assert sorted(covered) == list(range(8192))
        assert len(covered) == len(set(covered))


# -- 2 ----------------------------------------------------------------------------------


@pytest.mark.slow
def test_criterion_2_central_ni():
    with criterion(2, "prime-and-probe over shared LLC and time-shared L1 passes NI, 256 secrets each", 60.0):
        for name in ("pp-llc", "pp-l1"):
            s = scenario(name)
            assert all(vars(s.protections).values())
            v = check_ni(s)
            assert v.runs == 256
            assert v.passed, f"{name}: {v.divergence}"


# -- 3 ----------------------------------------------------------------------------------


@pytest.mark.slow
def test_criterion_3_defence_necessity():
    with criterion(3, "each disabled mechanism fails NI and its attack recovers 256/256 secrets", 300.0):
        failures = []
        for flag, name in DESIGNATED.items():
            s = scenario(name).without(flag)
            values = s.secret_values()
            assert len(values) == 256
            views = lo_views(s, values)
            verdict = compare_views(views)
            accuracy = attack_demo(s, views=views).accuracy
            if verdict.passed or accuracy != 1.0:
                failures.append((flag, name, verdict.passed, accuracy))
        assert not failures, failures


# -- 4 ----------------------------------------------------------------------------------


def test_criterion_4_pad_constancy():
    with criterion(4, "switch-end at slice_start+slice+pad for 0..100 dirty lines; unpadded time affine", 10.0):
        s = scenario("flush-latency")
        wb = s.hardware.params.writeback_per_line
        for k in range(101):
            start = 0
            ends = [e for e in run(s, k) if e.kind == "switch-end"]
            assert ends
            for e in ends:
                prev = s.domains[e.detail]
                assert e.time == start + prev.slice + prev.pad, (k, e)
                start = e.time
        bare = s.without("pad")
        lo = bare.lo
        first = [next(e.time for e in run(bare, k) if e.domain == lo and e.kind == "observe") for k in range(101)]
        assert all(a < b for a, b in zip(first, first[1:]))
        assert first == [first[0] + k * wb for k in range(101)]


# -- 5 ----------------------------------------------------------------------------------


def test_criterion_5_leakage_metrics():
    with criterion(5, "MI is 8.0 bits unprotected, 0.0 protected, BSC(0.25) exact", 10.0):
        leaky = scenario("flush-latency").without("pad")
        assert mutual_information(channel_matrix(leaky, symbol="first-observe")) == 8.0
        for name in ("flush-latency", "pp-l1", "interrupt"):
            s = scenario(name)
            assert mutual_information(channel_matrix(s, symbol="view-hash")) == 0.0, name
        p = 0.25
        closed = 1 + p * math.log2(p) + (1 - p) * math.log2(1 - p)
        bsc = ChannelMatrix.from_probs(np.array([[1 - p, p], [p, 1 - p]]))
        assert abs(mutual_information(bsc) - closed) <= 1e-9


# -- 6 ----------------------------------------------------------------------------------


def test_criterion_6_oracle_equivalence():
    with criterion(6, "cache_access matches brute-force LRU on 10,000 sequences; index arithmetic exact", 10.0):
        g = CacheGeometry(sets=4, ways=2, line_size=64, page_size=4096)
        rng = random.Random(20261018)
        for _ in range(10_000):
            c = CacheState.empty(g)
            ref = ReferenceCache(g.sets, g.ways, g.line_size)
            for _ in range(rng.randint(1, 24)):
                addr = rng.randrange(0, 64 * 64)
                kind = "write" if rng.random() < 0.4 else "read"
                r = cache_access(c, addr, kind)
                assert (r.hit, r.evicted_dirty) == ref.access(addr, kind)
                c = r.state
            contents = [[w.tag for w in sorted((w for w in ways if w.valid), key=lambda w: w.lru_rank)] for ways in c.lines]
            assert contents == ref.contents()
            assert c.dirty_lines() == len(ref.dirty)

        memory = 1 << 20
        for geom in (DEFAULT_LLC, CacheGeometry(sets=8192, ways=16)):
            per_colour = geom.page_size // geom.line_size  # sets covered by one page
            for frame in range(memory // geom.page_size):
                base = frame * geom.page_size
                assert colour_of_frame(frame, geom) == (base // geom.line_size) % geom.sets // per_colour
                for off in range(0, geom.page_size, geom.line_size):
                    addr = base + off
                    assert set_index(addr, geom) == (addr // geom.line_size) % geom.sets


# -- 7 ----------------------------------------------------------------------------------


@pytest.mark.slow
def test_criterion_7_case_coverage():
    cases = {"user instructions": ("pp-l1", "flush"), "syscalls": ("kernel-image", "clone"), "domain switches": ("flush-latency", "pad")}
    with criterion(7, "user-instruction, syscall and switch cases pass and each fails without its mechanism", 60.0):
        for case, (name, flag) in cases.items():
            s = scenario(name)
            assert check_ni(s).passed, f"{case}: {name} should pass"
            assert not check_ni(s.without(flag)).passed, f"{case}: {name} without {flag} should fail"
