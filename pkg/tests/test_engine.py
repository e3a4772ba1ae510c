import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from taforge import isa
from taforge.analysis import recover_cfg
from taforge.engine import (BUDGET_EXHAUSTED, CALL, COND_TAKEN, HOST_RETURN, RET, RETURNED,
                            TRAP, UNCOND, MachineState, call, decode_trace, encode_trace,
                            format_trace, image_filter, mem_access, parse_trace, read_trace,
                            restore, snapshot, state_hash, write_trace)
from taforge.errors import SnapshotMismatch
from taforge.fuzzer import DIRECT_TRAP, FuzzInput, Session, request
from taforge.memory import EXEC_NX, HEAP, OOB_READ, OOB_WRITE, FETCH, READ, WRITE
from taforge.profiles import PROFILES, TEE_ERROR_BAD_STATE

from conftest import built, load


def fresh_state(hdcp):
    spec, g = hdcp
    image = load(g, spec)
    return MachineState(image)


def test_immediate_return_traces_call_and_ret(hdcp):
    st_ = fresh_state(hdcp)
    f = st_.image.entrypoints["open"]
    status, trace = call(f, [0, 0, 0, 0], st_)
    assert (status.kind, status.return_value) == (RETURNED, 0)
    assert [k for _, _, k in trace.events] == [CALL, RET]
    assert trace.events[0] == (HOST_RETURN, f, CALL)
    assert trace.events[-1][1] == HOST_RETURN


def test_planted_overflow_faults_at_manifest_store(guarded):
    spec, g = guarded
    v = g.manifest.vulns[0]
    s = Session(g.elf, PROFILES[spec.profile], g.libs, mode=DIRECT_TRAP)
    res = s.run(FuzzInput(tuple(request(c, bytes([200]) * 300) for c in v.trigger)))
    assert res.fault is not None
    assert res.fault.kind == OOB_WRITE == v.fault_kind
    assert res.fault.pc - s.image.image_base == v.fault_offset


def test_same_call_on_fresh_states_is_identical(hdcp):
    out = []
    for _ in range(2):
        st_ = fresh_state(hdcp)
        out.append((call(st_.image.entrypoints["create"], [0] * 4, st_), state_hash(st_)))
    assert out[0] == out[1]


def test_snapshot_restores_a_heap_word(hdcp):
    st_ = fresh_state(hdcp)
    heap = st_.vas.allocate(0x1000, "RW", HEAP, "h")
    st_.vas.store(heap.base, 8, 0x1122334455667788)
    snap = snapshot(st_)
    st_.vas.store(heap.base, 8, 0)
    restore(st_, snap)
    assert st_.vas.load(heap.base, 8) == 0x1122334455667788


def test_restore_after_snapshot_is_identity(hdcp):
    st_ = fresh_state(hdcp)
    h = state_hash(st_)
    restore(st_, snapshot(st_))
    assert state_hash(st_) == h


def test_snapshot_from_other_state_is_rejected(hdcp):
    a, b = fresh_state(hdcp), fresh_state(hdcp)
    with pytest.raises(SnapshotMismatch):
        restore(a, snapshot(b))


def test_thousand_run_restore_cycles_keep_the_hash(hdcp):
    spec, g = hdcp
    s = Session(g.elf, PROFILES[spec.profile], g.libs)
    h0 = s.state_hash()
    r = random.Random(5)
    cmds = list(g.manifest.commands) + [999]
    for _ in range(1000):
        seq = tuple(request(r.choice(cmds), r.randbytes(r.randrange(0, 80)))
                    for _ in range(r.randrange(1, 4)))
        s.run(FuzzInput(seq))
        s.reset()
        assert s.state_hash() == h0


def test_region_boundaries(hdcp):
    st_ = fresh_state(hdcp)
    rw = next(r for r in st_.vas.regions
              if r.perms == "RW" and st_.vas.region_at(r.base - 1) is None)
    f = mem_access(st_, rw.base - 1, 1, READ)
    assert f.kind == OOB_READ and f.access_addr == rw.base - 1
    assert mem_access(st_, rw.base + 8, 8, WRITE, 0xAB) == 0xAB
    assert mem_access(st_, rw.base + 8, 8, READ) == 0xAB
    assert mem_access(st_, rw.base, 4, FETCH).kind == EXEC_NX


def test_budget_is_exact(hdcp):
    spec, g = hdcp
    s = Session(g.elf, PROFILES[spec.profile], g.libs)
    req = request(251, b"abcdef")
    s.reset()
    before = s.state.instret
    st_, _ = call(s.invoke_addr, s._marshal(req), s.state)
    need = s.state.instret - before
    assert st_.kind == RETURNED
    for budget, kind in ((need, RETURNED), (need - 1, BUDGET_EXHAUSTED), (3, BUDGET_EXHAUSTED)):
        s.reset()
        st_, _ = call(s.invoke_addr, s._marshal(req), s.state, budget)
        assert st_.kind == kind
        assert s.state.instret - before <= budget
        if kind == BUDGET_EXHAUSTED:
            assert s.state.instret - before == budget


def test_bad_state_without_prerequisites(hdcp_session):
    res = hdcp_session.run(FuzzInput((request(222, b"x" * 16),)))
    assert res.statuses[0].kind == RETURNED
    assert res.statuses[0].return_value == TEE_ERROR_BAD_STATE


def test_trace_filter_keeps_image_edges(hdcp):
    st_ = fresh_state(hdcp)
    keep = image_filter(st_.image)
    _, tr = call(st_.image.entrypoints["create"], [0] * 4, st_, trace_filter=keep)
    lo, hi = st_.image.extent
    for s, t, _ in tr.events:
        assert s == HOST_RETURN or lo <= s < hi
        assert t == HOST_RETURN or lo <= t < hi


def test_direct_edges_in_traces_exist_in_the_cfg(hdcp):
    spec, g = hdcp
    s = Session(g.elf, PROFILES[spec.profile], g.libs, mode=DIRECT_TRAP)
    cfg = recover_cfg(s.image)
    kinds = {COND_TAKEN: "COND", UNCOND: "UNCOND", CALL: "CALL"}
    r = random.Random(3)
    checked = 0
    for _ in range(200):
        seq = tuple(request(r.choice([202, 222, 230, 231, 251, 252, 7]), r.randbytes(40))
                    for _ in range(r.randrange(1, 5)))
        res = s.run(FuzzInput(seq))
        for src, dst, k in res.events:
            if k not in kinds or src == HOST_RETURN:
                continue
            ins = isa.decode(s.image.original_word(src))
            if ins is None or ins.op in ("br", "blr", "ret"):
                continue
            blk = cfg.block_of(src)
            assert (blk.start, dst, kinds[k]) in cfg.edges, (hex(src), hex(dst))
            checked += 1
    assert checked > 1000


def test_trace_text_and_binary_round_trip(tmp_path, hdcp_session):
    res = hdcp_session.run(FuzzInput((request(202, b"k" * 16), request(230))))
    ev = res.events
    assert parse_trace(format_trace(ev)) == ev
    blob = encode_trace(ev)
    assert len(blob) == 17 * len(ev)
    assert decode_trace(blob) == ev
    for binary in (False, True):
        p = tmp_path / f"t{binary}"
        write_trace(p, ev, binary=binary)
        assert read_trace(p) == ev


def test_direct_trap_records_svc_as_trap(hdcp):
    spec, g = hdcp
    s = Session(g.elf, PROFILES[spec.profile], g.libs, mode=DIRECT_TRAP)
    res = s.run(FuzzInput((request(230),)))
    traps = [(a, b) for a, b, k in res.events if k == TRAP]
    assert traps and all(b == a + 4 for a, b in traps)
    assert all(isa.is_svc(s.image.vas.read_word(a)) for a, _ in traps)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(st.sampled_from([202, 222, 230, 231, 251, 252, 5]),
                          st.binary(max_size=96)), min_size=1, max_size=4))
def test_snapshot_round_trip_identity(seq):
    spec, g = built(("hdcp", "TEEGRIS"))
    s = _session_cache(g, spec)
    s.reset()
    h0 = s.state_hash()
    inp = FuzzInput(tuple(request(c, d) for c, d in seq))
    first = s.run(inp)
    h1 = s.state_hash()
    restore(s.state, s.snap)
    assert s.state_hash() == h0
    again = s.run(inp)
    assert (again.events, again.statuses) == (first.events, first.statuses)
    assert s.state_hash() == h1


_sessions = {}


def _session_cache(g, spec):
    if spec.profile not in _sessions:
        _sessions[spec.profile] = Session(g.elf, PROFILES[spec.profile], g.libs)
    return _sessions[spec.profile]
