import random

import pytest
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st

from taforge.analysis import analyze
from taforge.corpusgen import (Command, Op, TaSpec, format_manifest, format_spec, generate,
                               hdcp_spec, parse_manifest, parse_spec, random_spec)
from taforge.corpusgen.spec import FAULT_OF, VULN_KINDS, plant_vulnerability, validate
from taforge.engine import RETURNED
from taforge.errors import SpecInvalid
from taforge.fuzzer import DIRECT_TRAP, REWRITTEN, FuzzInput, Session, request
from taforge.profiles import PROFILES
from taforge.rewriter import scan_svc_sites

from conftest import load

HOT = bytes([200]) * 300          # satisfies payload[0] > 64 with room to overflow


def session(g, spec, mode=DIRECT_TRAP):
    return Session(g.elf, PROFILES[spec.profile], g.libs, mode=mode)


def test_zero_commands_is_invalid():
    with pytest.raises(SpecInvalid):
        validate(TaSpec("OPTEE"))


def test_unknown_guard_is_invalid():
    with pytest.raises(SpecInvalid):
        plant_vulnerability(hdcp_spec(), "OOB_WRITE", [202, 999])


def test_undeclared_field_and_bad_device_are_invalid():
    with pytest.raises(SpecInvalid):
        validate(TaSpec("OPTEE", commands=[Command(1, (Op("context_read", "nope"),))]))
    with pytest.raises(SpecInvalid):
        validate(TaSpec("OPTEE", commands=[Command(1, (Op("device_open", "crypto"),))]))


def test_generation_is_deterministic():
    spec = random_spec(random.Random(77))
    a, b = generate(spec), generate(spec)
    assert a.elf == b.elf and a.stubs == b.stubs
    assert format_manifest(a.manifest) == format_manifest(b.manifest)


def test_hdcp_fixture_shape(hdcp):
    spec, g = hdcp
    m = g.manifest
    assert m.command_ids == {202, 222, 230, 231, 251, 252}
    assert {(a, b) for a, b, _ in m.dependencies} == {(202, 222), (230, 222), (252, 222)}
    assert m.needed == ["libtzsl.so", "libscrypto.so"]
    assert set(g.libs) == {"libtzsl.so", "libscrypto.so"}


@pytest.mark.parametrize("kind", VULN_KINDS)
def test_planted_vuln_faults_at_manifest_offset(kind):
    base = TaSpec("OPTEE", seed=3, commands=[Command(202, (Op("echo"),)),
                                             Command(230, (Op("checksum"),))])
    spec = plant_vulnerability(base, kind, [202, 230])
    g = generate(spec)
    (v,) = g.manifest.vulns
    assert v.trigger == (202, 230, v.command) and v.fault_kind == FAULT_OF[kind]
    s = session(g, spec)
    res = s.run(FuzzInput(tuple(request(c, HOT) for c in v.trigger)))
    assert res.fault is not None
    assert (res.fault.kind, res.fault.pc - s.image.image_base) == (v.fault_kind, v.fault_offset)


def test_uaf_stub_reads_a_freed_region():
    spec = plant_vulnerability(TaSpec("TEEGRIS", commands=[Command(1, (Op("echo"),))]),
                               "UAF_STUB", [1])
    g = generate(spec)
    (v,) = g.manifest.vulns
    s = session(g, spec)
    res = s.run(FuzzInput(tuple(request(c, HOT) for c in v.trigger)))
    assert res.fault.kind == "OOB_READ"
    assert res.fault.pc - s.image.image_base == v.fault_offset
    assert any(name == "free" for _, _, name, _, _ in s.syscall_log())


def test_predicate_must_hold(guarded):
    spec, g = guarded
    v = g.manifest.vulns[0]
    s = session(g, spec)
    cold = [request(c, HOT) for c in v.trigger[:-1]] + [request(v.command, bytes([64]) * 300)]
    res = s.run(FuzzInput(tuple(cold)))
    assert res.fault is None


def test_spec_text_round_trip():
    for seed in range(10):
        spec = random_spec(random.Random(seed))
        back = parse_spec(format_spec(spec))
        assert format_spec(back) == format_spec(spec)
        assert generate(back).elf == generate(spec).elf


def test_spec_grammar_example():
    text = """profile TEEGRIS
dispatch JUMP_TABLE
decoys 2
field key 16
command 202 context_write key
command 230 device_open dev://crypto
command 222 require key; device_read dev://crypto
command 9 vuln OOB_WRITE guard 202,230
"""
    spec = parse_spec(text)
    assert [c.id for c in spec.commands] == [202, 230, 222, 9]
    assert spec.command(9).vuln.guards == (202, 230)
    with pytest.raises(SpecInvalid):
        parse_spec(text.replace("202,230", "202,999"))


def test_manifest_text_round_trip(corpus):
    for _, g in corpus:
        text = format_manifest(g.manifest)
        assert format_manifest(parse_manifest(text)) == text
        assert parse_manifest(text) == g.manifest


def test_manifest_fidelity_over_corpus(corpus):
    profiles = {s.profile for s, _ in corpus}
    assert profiles == set(PROFILES)
    assert {s.dispatch for s, _ in corpus} == {"IF_ELSE_CHAIN", "JUMP_TABLE"}
    for spec, g in corpus:
        _check_fidelity(spec, g)


def _check_fidelity(spec, g):
    m = g.manifest
    image = load(g, spec)
    objs = {o.name: o for o in image.objects}
    want_sites = sorted((objs.get(r.obj, image.objects[0]).bias + r.offset, r.immediate)
                        for r in m.svc_sites)
    assert [(s.address, s.immediate) for s in scan_svc_sites(image)] == want_sites
    an = analyze(image)
    assert {c.value: c.handler - image.image_base for c in an.ids.ids} == \
        {k: arm for k, (arm, _) in m.commands.items()}
    assert an.deps.edges == m.dependencies


# ---- invariants over randomized specs ----

@settings(max_examples=15, deadline=None, suppress_health_check=[HealthCheck.too_slow])
@given(seed=st.integers(0, 2**32 - 1))
def test_manifest_fidelity_property(seed):
    spec = random_spec(random.Random(seed))
    _check_fidelity(spec, generate(spec))


@settings(max_examples=15, deadline=None, suppress_health_check=[HealthCheck.too_slow])
@given(seed=st.integers(0, 2**32 - 1))
def test_every_ta_round_trips_benign_commands(seed):
    spec = random_spec(random.Random(seed))
    g = generate(spec)
    s = session(g, spec, mode=REWRITTEN)
    for c in spec.commands:
        res = s.run(FuzzInput((request(c.id, b"\x01" * 8),)))
        assert res.fault is None, c.id
        assert res.statuses[0].kind == RETURNED


@settings(max_examples=15, deadline=None, suppress_health_check=[HealthCheck.too_slow])
@given(seed=st.integers(0, 2**32 - 1))
def test_vuln_reachability(seed):
    spec = random_spec(random.Random(seed), vuln=True)
    g = generate(spec)
    (v,) = g.manifest.vulns
    s = session(g, spec)
    res = s.run(FuzzInput(tuple(request(c, HOT) for c in v.trigger)))
    assert res.fault is not None and res.fault.kind == v.fault_kind
    assert res.fault.pc - s.image.image_base == v.fault_offset
    again = s.run(FuzzInput(tuple(request(c, HOT) for c in v.trigger)))
    assert (again.fault.pc, again.fault.access_addr) == (res.fault.pc, res.fault.access_addr)
    guards = v.trigger[:-1]
    for k in range(len(guards)):
        missing = guards[:k] + guards[k + 1:] + (v.command,)
        assert s.run(FuzzInput(tuple(request(c, HOT) for c in missing))).fault is None
