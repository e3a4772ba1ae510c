import itertools
import random

import pytest

from taforge import elf, isa
from taforge.analysis import (ANALYSIS_INCOMPLETE, COMPLEX, CONTEXT_MEMORY, DEVICE_FD, SIMPLE,
                              DependencyGraph, analyze, build_state_model, classify_branches,
                              enumerate_command_ids, format_state_model, parse_state_model,
                              recover_cfg)
from taforge.analysis.cfg import COND
from taforge.corpusgen import Command, FieldDecl, Op, TaSpec, generate, random_spec
from taforge.errors import CycleDetected
from taforge.fuzzer import FuzzInput, Session, request
from taforge.loader import load_ta
from taforge.profiles import PROFILES, TEE_ERROR_NOT_SUPPORTED

from conftest import load


def handmade(funcs):
    """OP-TEE image whose text is the given functions, each an exported symbol."""
    text, syms = b"", []
    for name, words in funcs.items():
        syms.append(elf.SymDef(name, "text", len(text), 4 * len(words), exported=True))
        text += b"".join(w.to_bytes(4, "little") for w in words)
    return load_ta(elf.write_elf(elf.ElfSpec(text=text, symbols=syms)), PROFILES["OPTEE"])


def analyzed(spec):
    g = generate(spec)
    return g, analyze(load(g, spec))


@pytest.fixture(scope="module")
def corpus_analyses(corpus):
    return [(spec, g, analyze(load(g, spec))) for spec, g in corpus]


# ---- cfg ----

def test_straight_line_function_is_one_block():
    img = handmade({"__ta_entry": [isa.ret()],
                    "f": [isa.movz(0, 1), isa.add_imm(0, 0, 1), isa.add_imm(0, 0, 2),
                          isa.add_imm(0, 0, 3), isa.ret()]})
    cfg = recover_cfg(img)
    f = img.symbols["f"]
    assert len(cfg.functions[f]) == 1
    assert len(cfg.function_edges(f)) == 0
    assert cfg.blocks[f].end - cfg.blocks[f].start == 20


def test_unresolved_register_branch_is_annotated():
    img = handmade({"__ta_entry": [isa.movz(5, 0x10), isa.br(5)]})
    cfg = recover_cfg(img)
    blk = cfg.block_of(img.symbols["__ta_entry"])
    assert ANALYSIS_INCOMPLETE in blk.annotations


def test_function_edge_counts_match_manifest(corpus_analyses, hdcp):
    spec, g = hdcp
    items = [(g, analyze(load(g, spec)))] + [(g, an) for _, g, an in corpus_analyses]
    for g, an in items:
        base = an.image.image_base
        for name, (off, n) in g.manifest.cfg.items():
            assert len(an.cfg.function_edges(base + off)) == n, name


def test_cond_blocks_have_two_successors(hdcp_image):
    cfg = recover_cfg(hdcp_image)
    for b in cfg.blocks.values():
        if b.term == COND:
            succ = {(t, k) for s, t, k in cfg.edges if s == b.start and k != "CALL"}
            assert len(succ) == 2, hex(b.start)


# ---- command ids ----

def test_hdcp_command_ids_and_default(hdcp, hdcp_image):
    spec, g = hdcp
    cfg = recover_cfg(hdcp_image)
    ids = enumerate_command_ids(cfg, hdcp_image.entrypoints["invoke"])
    assert ids.values >= {202, 222, 230, 231, 251, 252}
    assert ids.default_handler - hdcp_image.image_base == g.manifest.default_offset
    s = Session(g.elf, PROFILES[spec.profile], g.libs)
    res = s.run(FuzzInput((request(999),)))
    assert res.statuses[0].return_value == TEE_ERROR_NOT_SUPPORTED


def test_decoy_switch_values_are_excluded(corpus_analyses):
    decoys = 0
    for _, g, an in corpus_analyses:
        assert g.manifest.decoy_values
        assert not an.ids.values & g.manifest.decoy_values
        decoys += len(g.manifest.decoy_values)
    assert decoys >= 20


def test_invoke_without_comparisons_gives_empty_set():
    img = handmade({"__ta_entry": [isa.movz(0, 0), isa.ret()]})
    ids = enumerate_command_ids(recover_cfg(img), img.entrypoints["invoke"])
    assert ids.ids == set() and ids.default_handler is None


def test_corpus_ids_exact(corpus_analyses):
    for spec, g, an in corpus_analyses:
        base = an.image.image_base
        got = {c.value: c.handler - base for c in an.ids.ids}
        assert got == {k: arm for k, (arm, _) in g.manifest.commands.items()}, spec.profile
        assert an.ids.default_handler - base == g.manifest.default_offset


# ---- dependencies ----

def test_hdcp_dependency_edges(hdcp, hdcp_image):
    an = analyze(hdcp_image)
    assert (230, 222, DEVICE_FD) in an.deps.edges
    assert (202, 222, CONTEXT_MEMORY) in an.deps.edges
    assert an.deps.edges == hdcp[1].manifest.dependencies


def test_self_contained_device_use_gives_no_edges():
    spec = TaSpec("OPTEE", commands=[Command(1, (Op("device_local", "dev://a"),)),
                                     Command(2, (Op("device_local", "dev://a"),))])
    _, an = analyzed(spec)
    assert an.ids.values == {1, 2}
    assert an.deps.edges == set()


def test_field_without_writer_is_listed_without_edge():
    spec = TaSpec("OPTEE", fields=[FieldDecl("orphan", 8, dangling=True)],
                  commands=[Command(1, (Op("context_read", "orphan"),)), Command(2, (Op("echo"),))])
    g, an = analyzed(spec)
    assert an.deps.edges == set()
    (f,) = an.deps.context_fields
    rec = next(r for r in g.manifest.fields if r.name == "orphan")
    assert (f.offset, f.width, f.writers, f.readers) == (rec.offset, rec.width, set(), {1})


def test_corpus_dependencies_fields_and_context_exact(corpus_analyses):
    for spec, g, an in corpus_analyses:
        m = g.manifest
        base = an.image.image_base
        assert an.deps.edges == m.dependencies
        want = {(f.offset, f.width, f.writers, f.readers) for f in m.fields if f.writers or f.readers}
        got = {(f.offset, f.width, frozenset(f.writers), frozenset(f.readers))
               for f in an.deps.context_fields}
        assert got == want
        if an.deps.context_object:
            assert an.deps.context_object[0] - base == m.context_offset


def test_ten_random_field_flows_recovered_exactly():
    r = random.Random(2024)
    for _ in range(10):
        spec = random_spec(r, vuln=False)
        g, an = analyzed(spec)
        assert an.deps.edges == g.manifest.dependencies


# ---- branch complexity ----

def test_immediate_compare_is_simple_and_loaded_compare_complex():
    img = handmade({
        "__ta_entry": [isa.ret()],
        "simple": [isa.subs_imm(31, 2, 230), isa.b_cond("eq", 8), isa.ret(), isa.ret()],
        "loaded": [isa.ldr(9, 0, 8), isa.subs_imm(31, 9, 1), isa.b_cond("ne", 8), isa.ret(), isa.ret()],
    })
    labels = classify_branches(recover_cfg(img)).labels
    assert labels == {img.symbols["simple"]: SIMPLE, img.symbols["loaded"]: COMPLEX}


def test_branch_labels_match_manifest(corpus_analyses):
    for _, g, an in corpus_analyses:
        base = an.image.image_base
        got = {pc - base: lab for pc, lab in an.branches.by_branch().items()}
        for off, lab in g.manifest.branches.items():
            assert got.get(off) == lab, hex(off)


def test_generated_mix_is_measured_within_two_points():
    for seed in range(3):
        spec = random_spec(random.Random(seed), n_commands=10, branch_mix=0.6)
        _, an = analyzed(spec)
        simple, complex_ = an.branches.summary
        assert abs(simple - 0.6) <= 0.02 and abs(complex_ - 0.4) <= 0.02
        assert simple + complex_ == pytest.approx(1.0)


def test_every_cond_block_gets_one_label(hdcp_image):
    cfg = recover_cfg(hdcp_image)
    bc = classify_branches(cfg)
    conds = {b for b, blk in cfg.blocks.items() if blk.term == COND}
    assert set(bc.labels) == conds
    assert set(bc.labels.values()) <= {SIMPLE, COMPLEX}


# ---- state model ----

def brute_force_orders(nodes, edges):
    """Every permutation of ``nodes`` that respects ``edges`` (a before b)."""
    out = set()
    for perm in itertools.permutations(nodes):
        pos = {c: i for i, c in enumerate(perm)}
        if all(pos[a] < pos[b] for a, b in edges if a in pos and b in pos):
            out.add(perm)
    return out


def test_three_independent_prereqs_in_any_order():
    g = DependencyGraph({202, 222, 230, 252}, {(202, 222, CONTEXT_MEMORY), (230, 222, DEVICE_FD),
                                               (252, 222, CONTEXT_MEMORY)})
    model = build_state_model(g)
    assert set(model.chain(222)) == {202, 230, 252}
    assert set(model.orderings(222)) == brute_force_orders([202, 230, 252], [])
    assert len(set(model.orderings(222))) == 6
    for c in (202, 230, 252):
        assert model.chain(c) == ()


def test_chained_prereqs_match_brute_force():
    edges = {(1, 2, DEVICE_FD), (1, 3, CONTEXT_MEMORY), (2, 4, CONTEXT_MEMORY),
             (3, 4, DEVICE_FD), (4, 5, CONTEXT_MEMORY)}
    model = build_state_model(DependencyGraph({1, 2, 3, 4, 5, 6}, edges))
    pairs = [(a, b) for a, b, _ in edges]
    assert set(model.orderings(5)) == brute_force_orders([1, 2, 3, 4], pairs)
    assert model.chain(5) == (1, 2, 3, 4)
    assert model.chain(6) == ()
    assert all(model.legal(o + (5,)) for o in model.orderings(5))
    assert not model.legal((2, 1, 3, 4, 5))


def test_empty_graph_gives_empty_prefixes():
    model = build_state_model(DependencyGraph({1, 2, 3}, set()))
    assert model.empty
    assert all(model.chain(c) == () for c in (1, 2, 3))


def test_cycle_is_detected():
    g = DependencyGraph({1, 2, 3}, {(1, 2, DEVICE_FD), (2, 3, DEVICE_FD), (3, 1, CONTEXT_MEMORY)})
    with pytest.raises(CycleDetected):
        build_state_model(g)


def test_state_model_text_round_trip(hdcp_image):
    model = analyze(hdcp_image).model
    text = format_state_model(model)
    assert "cmd 222: prereqs 202 230 252" in text
    back = parse_state_model(text)
    assert back.prefixes == model.prefixes
    assert format_state_model(back) == text
