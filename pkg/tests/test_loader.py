import dataclasses
import io
import random

import pytest
from hypothesis import HealthCheck, assume, given, settings
from hypothesis import strategies as st

from taforge import elf as elfmod
from taforge.corpusgen import generate, hdcp_spec, random_spec
from taforge.errors import EntryNotFound, MalformedImage, UnresolvedSymbol, WindowExhausted
from taforge.loader import format_layout, link_dependencies, load_image, load_ta
from taforge.profiles import PROFILES, LayoutConfig, resolve_profile

from conftest import built, load

elftools = pytest.importorskip("elftools.elf.elffile")


def regions_disjoint(vas):
    regs = sorted(vas.regions, key=lambda r: r.base)
    return all(a.end <= b.base for a, b in zip(regs, regs[1:]))


def test_rejects_non_elf_bytes():
    with pytest.raises(MalformedImage):
        load_image(b"\0\0\0\0", PROFILES["OPTEE"])


def test_teegris_queues_its_two_libraries(hdcp):
    _, g = hdcp
    image = load_image(g.elf, PROFILES["TEEGRIS"])
    assert image.dependency_queue == ["libtzsl.so", "libscrypto.so"]


def test_optee_segments_match_pyelftools():
    spec, g = built(("guarded", "OPTEE"))
    image = load(g, spec)
    ref = elftools.ELFFile(io.BytesIO(g.elf))
    loads = [s for s in ref.iter_segments() if s["p_type"] == "PT_LOAD"]
    assert len(loads) == 2
    ours = sorted(image.objects[0].elf.loads, key=lambda s: s.vaddr)
    for seg, r in zip(ours, loads):
        assert (seg.offset, seg.vaddr, seg.filesz, seg.memsz, seg.flags) == \
            (r["p_offset"], r["p_vaddr"], r["p_filesz"], r["p_memsz"], r["p_flags"])
    regions = sorted(image.objects[0].regions, key=lambda r: r.base)
    perms = {5: "RX", 6: "RW", 4: "R", 7: "RWX"}
    relocated = [rel["r_offset"] for sec in ref.iter_sections()
                 if sec.header["sh_type"] == "SHT_RELA" for rel in sec.iter_relocations()]
    for reg, r in zip(regions, loads):
        assert reg.base % 4096 == 0 and reg.end % 4096 == 0
        assert reg.base == (image.image_base + r["p_vaddr"]) & ~0xFFF
        assert reg.end >= image.image_base + r["p_vaddr"] + r["p_memsz"]
        assert reg.perms == perms[r["p_flags"]]
        mapped = bytearray(reg.data[r["p_vaddr"] & 0xFFF:][:r["p_filesz"]])
        ref_bytes = bytearray(r.data())
        for rel in relocated:          # relocation targets differ by design
            o = rel - r["p_vaddr"]
            if 0 <= o < len(ref_bytes):
                mapped[o:o + 8] = ref_bytes[o:o + 8] = bytes(8)
        assert mapped == ref_bytes
    assert [r.perms for r in regions] == ["RX", "RW"]
    assert regions[0].end <= regions[1].base


def test_symbols_and_needed_match_pyelftools(hdcp):
    _, g = hdcp
    ours = elfmod.parse_elf(g.elf)
    ref = elftools.ELFFile(io.BytesIO(g.elf))
    dyn = ref.get_section_by_name(".dynamic")
    needed = [t.needed for t in dyn.iter_tags() if t.entry.d_tag == "DT_NEEDED"]
    assert ours.needed == needed
    symtab = ref.get_section_by_name(".symtab")
    theirs = {s.name: (s["st_value"], s["st_size"]) for s in symtab.iter_symbols() if s.name}
    assert {s.name: (s.value, s.size) for s in ours.symbols if s.name} == theirs
    rels = []
    for sec in ref.iter_sections():
        if sec.header["sh_type"] == "SHT_RELA":
            rels += [(r["r_offset"], r["r_info_type"], r["r_addend"]) for r in sec.iter_relocations()]
    assert sorted((r.offset, r.type, r.addend) for r in ours.relocs) == sorted(rels)


def test_import_binds_to_stub_export(hdcp):
    spec, g = hdcp
    image = load(g, spec)
    libs = {o.name: o for o in image.objects[1:]}
    exports = g.manifest.stubs
    assert image.bound_slots
    for slot, (sym, value) in image.bound_slots.items():
        owner = [n for n, ex in exports.items() if sym in ex]
        assert len(owner) == 1, sym
        assert value == libs[owner[0]].bias + exports[owner[0]][sym]


def test_static_image_is_untouched_by_linking():
    spec, g = built(("guarded", "OPTEE"))
    image = load_image(g.elf, PROFILES["OPTEE"])
    before = image.vas.contents_hash()
    assert link_dependencies(image, None) is image
    assert image.vas.contents_hash() == before


def test_missing_export_is_unresolved(hdcp):
    _, g = hdcp
    swapped = {"libtzsl.so": g.libs["libscrypto.so"], "libscrypto.so": g.libs["libscrypto.so"]}
    with pytest.raises(UnresolvedSymbol):
        load_ta(g.elf, PROFILES["TEEGRIS"], libs=swapped)


@pytest.mark.parametrize("profile, roles", [
    ("QSEE", {"init": "tz_app_init", "invoke": "CApp_invoke"}),
    ("TEEGRIS", {"create": "TA_CreateEntryPoint", "open": "TA_OpenSessionEntryPoint",
                 "invoke": "TA_InvokeCommandEntryPoint"}),
])
def test_entrypoints_per_profile(profile, roles):
    spec = hdcp_spec(profile)
    g = generate(spec)
    image = load(g, spec)
    assert image.entrypoints == {r: image.symbols[s] for r, s in roles.items()}
    for r, (sym, off) in g.manifest.entries.items():
        assert image.entrypoints[r] == image.image_base + off


def test_stripped_invoke_symbol():
    spec, g = built(("guarded", "OPTEE"))
    stripped = g.elf.replace(b"__ta_entry\0", b"__xx_entry\0")
    assert stripped != g.elf
    with pytest.raises(EntryNotFound):
        load_ta(stripped, PROFILES["OPTEE"])


def test_window_too_small():
    spec, g = built(("guarded", "OPTEE"))
    with pytest.raises(WindowExhausted):
        load_image(g.elf, PROFILES["OPTEE"], LayoutConfig(0x400000, 0x402000))


def test_configured_example_window_is_honoured():
    spec, g = built(("guarded", "OPTEE"))
    image = load(g, spec, LayoutConfig(0xFF000000, 0xFF100000, stack_size=0x10000))
    lo, hi = image.vas.window
    assert all(lo <= r.base and r.end <= hi for r in image.vas.regions)


def test_layout_table_lists_every_region(hdcp_image):
    text = format_layout(hdcp_image)
    assert text.count("\nregion ") == len(hdcp_image.vas.regions)
    assert "entry invoke" in text


def test_profile_config_file_round_trip(tmp_path):
    from taforge.profiles import format_profile_config
    p = tmp_path / "teegris.cfg"
    p.write_text(format_profile_config(PROFILES["TEEGRIS"], LayoutConfig(0x800000, 0x20000000)))
    profile, layout = resolve_profile(str(p))
    assert profile == PROFILES["TEEGRIS"]
    assert layout == LayoutConfig(0x800000, 0x20000000)


# ---- invariants over randomized specs ----

windows = st.tuples(st.integers(0x400, 0xF0000), st.integers(0x400, 0x40000))


@settings(max_examples=25, deadline=None, suppress_health_check=[HealthCheck.too_slow])
@given(seed=st.integers(0, 2**32 - 1), window=windows)
def test_regions_disjoint_and_w32_confined(seed, window):
    spec = random_spec(random.Random(seed))
    g = generate(spec)
    lo_page, pages = window
    layout = LayoutConfig(lo_page << 12, (lo_page + pages) << 12)
    try:
        image = load(g, spec, layout)
    except WindowExhausted:
        assume(False)
    assert regions_disjoint(image.vas)
    if image.word_width == 32:
        assert max(r.end for r in image.vas.regions) <= 1 << 32
    assert all(r.base % 4096 == 0 and r.length % 4096 == 0 for r in image.vas.regions)


@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_loading_is_deterministic_and_matches_manifest(seed):
    spec = random_spec(random.Random(seed))
    g = generate(spec)
    a, b = load(g, spec), load(g, spec)
    assert a.vas.contents_hash() == b.vas.contents_hash()
    assert a.entrypoints == b.entrypoints
    for role, (_, off) in g.manifest.entries.items():
        assert a.entrypoints[role] == a.image_base + off


def test_w32_window_above_4g_is_clipped():
    spec = dataclasses.replace(hdcp_spec("QSEE"))
    g = generate(spec)
    image = load(g, spec, LayoutConfig(0x400000, 0x2_0000_0000))
    assert image.word_width == 32
    assert max(r.end for r in image.vas.regions) <= 1 << 32
