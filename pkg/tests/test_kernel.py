import pytest
from hypothesis import given
from hypothesis import strategies as st

from timeprot.errors import AccessFault, ColourExhausted, PadOverrun, UnknownIrq, ValidationError
from timeprot.kernel import (
    Domain,
    FrameAllocator,
    Hardware,
    Protections,
    alloc_frame,
    boot,
    irq_schedule,
    kernel_image_of,
    safe_pad,
    step,
    switch_bound,
    trap_bound,
)
from timeprot.march import colour_of_frame, llc_sets_of_colour, set_index
from timeprot.workloads import Compute, Halt, Io, Load, Program, Store, Syscall, assemble

HW = Hardware()
P = HW.params


def dom(i, program="", slice=1000, pad=4000, colours=None, **kw):
    prog = assemble(program) if isinstance(program, str) else program
    return Domain(i, frozenset(colours if colours is not None else {i}), slice=slice, pad=pad, program=prog, **kw)


def run_machine(m, max_steps=100_000):
    trace = []
    while not m.halted and m.steps < max_steps:
        m, evs = step(m)
        trace.extend(evs)
    return m, trace


def switch_ends(trace):
    return [e for e in trace if e.kind == "switch-end"]


def check_pad_constancy(domains, trace):
    start = 0
    for e in switch_ends(trace):
        prev = domains[e.detail]
        assert e.time == start + prev.slice + prev.pad
        start = e.time


# -- frame allocation ---------------------------------------------------------------


def test_alloc_frame_respects_colour():
    a = FrameAllocator.create(HW.frames, HW.llc)
    f, a = alloc_frame(a, dom(0, colours={3}))
    assert f % 16 == 3
    assert a.log == ((f, 0),)


def test_alloc_frame_disjoint_domains():
    a = FrameAllocator.create(HW.frames, HW.llc)
    d0, d1 = dom(0, colours={0, 1, 2}), dom(1, colours={5, 6})
    for _ in range(20):
        _, a = alloc_frame(a, d0)
        _, a = alloc_frame(a, d1)
    c0 = {colour_of_frame(f, HW.llc) for f in a.frames_of(0)}
    c1 = {colour_of_frame(f, HW.llc) for f in a.frames_of(1)}
    assert c0 <= {0, 1, 2} and c1 <= {5, 6}


def test_alloc_frame_exhausted():
    a = FrameAllocator.create(32, HW.llc)  # two frames per colour
    d = dom(0, colours={4})
    _, a = alloc_frame(a, d)
    _, a = alloc_frame(a, d)
    with pytest.raises(ColourExhausted):
        alloc_frame(a, d)


def test_alloc_unpartitioned_takes_lowest_frame():
    a = FrameAllocator.create(HW.frames, HW.llc)
    f, a = alloc_frame(a, dom(0, colours={9}), partitioned=False)
    assert f == 0


@given(st.lists(st.tuples(st.integers(0, 3), st.integers(1, 3)), min_size=1, max_size=4))
def test_allocated_frames_within_owner_colours(spec):
    domains = []
    for i, (ncol, pages) in enumerate(spec):
        cols = {(i * 3 + j) % 15 for j in range(ncol + 1)}
        domains.append((dom(i, colours=cols), pages))
    taken = set()
    a = FrameAllocator.create(HW.frames, HW.llc)
    for d, pages in domains:
        for _ in range(pages):
            f, a = alloc_frame(a, d)
            assert colour_of_frame(f, HW.llc) in d.colours
            assert f not in taken
            taken.add(f)


# -- boot and kernel images ----------------------------------------------------------


def llc_sets_of_frames(frames):
    sets = set()
    for f in frames:
        sets |= set(llc_sets_of_colour(colour_of_frame(f, HW.llc), HW.llc))
    return sets


def test_boot_colour_disjointness_includes_kernel_images():
    d0 = dom(0, colours={0, 1, 2}, pages=5)
    d1 = dom(1, colours={3, 4}, pages=7)
    m = boot(HW, (d0, d1))
    reach = []
    for d in m.domains:
        frames = list(m.page_tables[d.id]) + list(kernel_image_of(m, d.id))
        assert {colour_of_frame(f, HW.llc) for f in frames} <= d.colours
        reach.append(llc_sets_of_frames(frames))
    assert not reach[0] & reach[1]
    kernel = {set_index(a, HW.llc) for a in m.kernel_data}
    assert kernel <= set(llc_sets_of_colour(15, HW.llc))
    assert not kernel & (reach[0] | reach[1])


def test_kernel_clone_images_occupy_disjoint_sets():
    m = boot(HW, (dom(0, colours={0}), dom(1, colours={1})))
    img0, img1 = kernel_image_of(m, 0), kernel_image_of(m, 1)
    lines = lambda img: {set_index(f * 4096 + o, HW.llc) for f in img for o in range(0, 4096, 64)}
    assert not lines(img0) & lines(img1)


def test_clone_off_shares_one_image():
    m = boot(HW, (dom(0), dom(1)), Protections(kernel_clone=False))
    assert kernel_image_of(m, 0) == kernel_image_of(m, 1) == m.shared_image
    assert colour_of_frame(m.shared_image[0], HW.llc) == 15


@pytest.mark.parametrize(
    "domains, message",
    [
        ((dom(0, colours={1, 2}), dom(1, colours={2})), "colour 2"),
        ((dom(0, colours={15}),), "reserved"),
        ((dom(0, colours={16}),), "out of range"),
        ((dom(0, colours=set()),), "no colours"),
        ((dom(0, irqs=frozenset({1})), dom(1, irqs=frozenset({1}))), "irq 1"),
        ((dom(1),), "ids"),
    ],
)
def test_boot_validation(domains, message):
    with pytest.raises(ValidationError, match=message):
        boot(HW, domains)


def test_overlapping_colours_allowed_without_partitioning():
    boot(HW, (dom(0, colours={1, 2}), dom(1, colours={2})), Protections(colour_partitioning=False))


# -- user instructions ----------------------------------------------------------------


def test_compute_advances_exactly():
    _, t = run_machine(boot(HW, (dom(0, "COMPUTE 5"),)))
    assert [(e.time, e.kind, e.detail) for e in t] == [(5, "instruction-retired", 5)]


def test_cold_load_costs_mem_plus_tlb_miss():
    _, t = run_machine(boot(HW, (dom(0, "LOAD 0\nLOAD 8\nLOAD 0x40"),)))
    assert [e.detail for e in t] == [P.mem + P.tlb_miss_penalty, P.l1_hit, P.mem]
    assert t[-1].time == 130 + 1 + 100


def test_secret_load_resolves_at_run_time():
    prog = "SECRET_LOAD 0x0 64\nLOAD 0xC0"
    _, t = run_machine(boot(HW, (dom(0, prog),), secret=3))
    assert t[1].detail == P.l1_hit  # 0xC0 = 0 + 3 * 64 was loaded
    _, t = run_machine(boot(HW, (dom(0, prog),), secret=2))
    assert t[1].detail == P.mem


def test_unmapped_access_faults():
    with pytest.raises(AccessFault):
        run_machine(boot(HW, (dom(0, "LOAD 0x1000"),)))


def test_syscall_cost_cold_and_warm():
    _, t = run_machine(boot(HW, (dom(0, "SYSCALL 2\nSYSCALL 2"),)))
    exits = [e.detail for e in t if e.kind == "syscall-exit"]
    cold = P.kernel_entry + P.mispredict + P.mem + 4 * P.mem + P.kernel_exit
    warm = P.kernel_entry + P.predict_ok + P.l1_hit + 4 * P.l1_hit + P.kernel_exit
    assert exits == [cold, warm]
    assert cold == trap_bound(P)


def test_halt_idles_until_next_slice():
    d0 = dom(0, "COMPUTE 1\nHALT\nCOMPUTE 2", slice=100, pad=4000)
    d1 = dom(1, "COMPUTE 3", slice=100, pad=4000)
    _, t = run_machine(boot(HW, (d0, d1)))
    retire = [(e.time, e.domain, e.detail) for e in t if e.kind == "instruction-retired"]
    assert retire == [(1, 0, 1), (1, 0, 0), (4103, 1, 3), (8202, 0, 2)]


# -- domain switch ---------------------------------------------------------------------


def test_timer_during_syscall_delays_switch_begin_not_end():
    d0 = dom(0, "COMPUTE 99\nSYSCALL\nCOMPUTE 1", slice=100)
    d1 = dom(1, "COMPUTE 1", slice=100)
    _, t = run_machine(boot(HW, (d0, d1)))
    begin = next(e for e in t if e.kind == "switch-begin")
    end = next(e for e in t if e.kind == "switch-end")
    assert begin.time == 99 + trap_bound(P)
    assert end.time == 100 + 4000


def stores(k):
    return Program(tuple(Store((j // 64) * 4096 + (j % 64) * 64) for j in range(k)) + (Halt(),))


@given(st.integers(0, 256))
def test_pad_constancy_over_dirty_count(k):
    d0 = dom(0, stores(k), slice=40_000, pages=4)
    d1 = dom(1, "OBSERVE first", slice=1000)
    m, t = run_machine(boot(HW, (d0, d1)))
    check_pad_constancy(m.domains, t)
    first = next(e for e in t if e.kind == "observe")
    assert first.time == 40_000 + 4000


def test_unpadded_switch_reveals_dirty_count():
    times = []
    for k in (0, 1, 7, 100):
        d0 = dom(0, stores(k), slice=40_000, pages=4)
        d1 = dom(1, "OBSERVE first", slice=1000)
        _, t = run_machine(boot(HW, (d0, d1), Protections(pad_enabled=False)))
        times.append(next(e.time for e in t if e.kind == "observe"))
    assert [b - a for a, b in zip(times, times[1:])] == [10, 60, 930]


def test_zero_pad_overruns():
    with pytest.raises(PadOverrun) as e:
        run_machine(boot(HW, (dom(0, "COMPUTE 1", pad=0), dom(1, "COMPUTE 1"))))
    assert e.value.domain == 0 and e.value.deadline == 1000


def test_flushable_state_invalid_after_switch():
    d0 = dom(0, "STORE 0\nLOAD 0x40\nSYSCALL", slice=2000)
    m = boot(HW, (d0, dom(1, "COMPUTE 1")))
    while m.current == 0:
        m, _ = step(m)
    assert m.march.flushable_valid_entries() == 0
    assert m.march.llc.valid_lines() > 0


def test_flush_off_keeps_core_state():
    d0 = dom(0, "LOAD 0", slice=2000)
    m = boot(HW, (d0, dom(1, "COMPUTE 1")), Protections(flush_on_switch=False))
    while m.current == 0:
        m, _ = step(m)
    assert m.march.l1d.valid_lines() > 0


programs = st.lists(
    st.one_of(
        st.builds(Load, st.integers(0, 2 * 4096 - 1)),
        st.builds(Store, st.integers(0, 2 * 4096 - 1)),
        st.builds(Compute, st.integers(0, 400)),
        st.builds(Syscall, st.integers(0, 8)),
        st.just(Halt()),
    ),
    max_size=40,
).map(lambda xs: Program(tuple(xs)))


@given(programs, programs, st.integers(1, 600), st.integers(1, 600))
def test_safe_pad_never_overruns_and_schedule_is_program_independent(p0, p1, s0, s1):
    d0 = Domain(0, frozenset({0}), slice=s0, pad=safe_pad(HW, p0), program=p0, pages=2)
    d1 = Domain(1, frozenset({1}), slice=s1, pad=safe_pad(HW, p1), program=p1, pages=2)
    m, t = run_machine(boot(HW, (d0, d1)))
    check_pad_constancy(m.domains, t)
    # the switch schedule depends only on slices and pads
    expected, now = [], 0
    for e in switch_ends(t):
        prev = m.domains[e.detail]
        now += prev.slice + prev.pad
        expected.append((e.domain, now))
    assert [(e.domain, e.time) for e in switch_ends(t)] == expected


def test_switch_bound_value():
    assert switch_bound(HW) == trap_bound(P) + P.flush_base + 256 * P.writeback_per_line


def test_filler_runs_during_pad_without_moving_deadline():
    filler = assemble("COMPUTE 100\n" * 50)
    d0 = dom(0, "COMPUTE 1", slice=100, filler=filler, filler_margin=800)
    m, t = run_machine(boot(HW, (d0, dom(1, "COMPUTE 1"))))
    retired0 = [e for e in t if e.domain == 0 and e.kind == "instruction-retired"]
    assert len(retired0) > 1
    assert all(e.time <= 100 + 4000 - 800 + 100 for e in retired0)
    check_pad_constancy(m.domains, t)


# -- interrupts ---------------------------------------------------------------------------


def irq_domains():
    return dom(0, "IO 1 1000\nHALT", slice=3000, irqs=frozenset({0})), dom(1, "HALT", slice=3000, irqs=frozenset({1}))


def test_foreign_irq_waits_for_owner_slice():
    _, t = run_machine(boot(HW, irq_domains()))
    irq = next(e for e in t if e.kind == "irq-delivered")
    assert (irq.time, irq.domain, irq.detail) == (3000 + 4000 + P.kernel_entry, 1, 1)


def test_unpartitioned_irq_hits_current_domain():
    _, t = run_machine(boot(HW, irq_domains(), Protections(irq_partitioning=False)))
    irq = next(e for e in t if e.kind == "irq-delivered")
    assert (irq.time, irq.domain) == (1000 + P.kernel_entry, 0)


def test_own_irq_delivered_at_fire_time_plus_entry():
    d0 = dom(0, "IO 0 1000\nHALT", slice=5000, irqs=frozenset({0}))
    _, t = run_machine(boot(HW, (d0, dom(1))))
    irq = next(e for e in t if e.kind == "irq-delivered")
    assert irq.time == 1000 + P.kernel_entry


def test_unknown_irq():
    m = boot(HW, (dom(0),))
    with pytest.raises(UnknownIrq):
        irq_schedule(m, 7, 10)
    with pytest.raises(UnknownIrq):
        run_machine(boot(HW, (dom(0, "IO 7 5"),)))


@given(
    st.lists(st.tuples(st.integers(0, 2), st.integers(0, 9000)), max_size=6),
    st.lists(st.tuples(st.integers(0, 2), st.integers(0, 9000)), max_size=6),
)
def test_masking_soundness(io0, io1):
    owner = {0: 0, 1: 1, 2: 1}
    prog = lambda ios: Program(tuple(Io(i, d) for i, d in ios) + (Halt(),))
    d0 = Domain(0, frozenset({0}), slice=2000, pad=safe_pad(HW, Program()), program=prog(io0), irqs=frozenset({0}))
    d1 = Domain(1, frozenset({1}), slice=2500, pad=safe_pad(HW, Program()), program=prog(io1), irqs=frozenset({1, 2}))
    m, t = run_machine(boot(HW, (d0, d1)))
    delivered = [e for e in t if e.kind == "irq-delivered"]
    assert all(owner[e.detail] == e.domain for e in delivered)
    assert len(delivered) == len(io0) + len(io1)
    check_pad_constancy(m.domains, t)


def test_trace_times_non_decreasing():
    d0 = dom(0, "LOAD 0\nSYSCALL\nIO 1 10\nCOMPUTE 5000", slice=3000, irqs=frozenset({0}))
    d1 = dom(1, "STORE 0\nHALT\nLOAD 0", slice=2000, irqs=frozenset({1}))
    for prot in (Protections(), Protections(pad_enabled=False, irq_partitioning=False)):
        _, t = run_machine(boot(HW, (d0, d1), prot))
        assert all(a.time <= b.time for a, b in zip(t, t[1:]))
