import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from taforge import isa
from taforge.corpusgen import generate, random_spec
from taforge.errors import RangeExceeded, UnknownTrampoline
from taforge.loader import TRAMPOLINE_SLOT
from taforge.memory import TRAMPOLINE
from taforge.rewriter import (SvcSite, install_trampolines, patch_report, rewrite, scan_svc_sites,
                              site_for_trampoline)

from conftest import built, load

capstone = pytest.importorskip("capstone")


def code_copy(image):
    return {r.base: bytes(r.data) for r in image.code_regions()}


def manifest_sites(image, manifest):
    objs = {o.name: o for o in image.objects}
    names = {"ta": image.objects[0]}
    out = []
    for s in manifest.svc_sites:
        obj = names.get(s.obj) or objs[s.obj]
        out.append((obj.bias + s.offset, s.immediate))
    return sorted(out)


def test_scan_matches_manifest(hdcp):
    spec, g = hdcp
    image = load(g, spec)
    found = [(s.address, s.immediate) for s in scan_svc_sites(image)]
    assert found == manifest_sites(image, g.manifest)


def test_three_site_image_patches_exactly_three_words():
    spec, g = built(("guarded", "OPTEE"))
    image = load(g, spec)
    sites = scan_svc_sites(image)[:3]
    before = code_copy(image)
    table = install_trampolines(image, sites)
    assert len(table) == 3
    changed = []
    for base, data in before.items():
        now = bytes(image.vas.region_at(base).data)
        changed += [base + o for o in range(0, len(data), 4) if data[o:o + 4] != now[o:o + 4]]
    assert sorted(changed) == [s.address for s in sites]


def test_svc_immediates_agree_with_capstone():
    spec, g = built(("guarded", "OPTEE"))
    image = load(g, spec)
    md = capstone.Cs(capstone.CS_ARCH_ARM64, capstone.CS_MODE_ARM)
    for s in scan_svc_sites(image):
        (ins,) = md.disasm(s.original_word.to_bytes(4, "little"), s.address)
        assert ins.mnemonic == "svc" and int(ins.op_str.lstrip("#"), 16) == s.immediate


def test_no_sites_leaves_image_untouched():
    spec, g = built(("guarded", "OPTEE"))
    image = load(g, spec)
    before = image.vas.contents_hash()
    table = install_trampolines(image, [])
    assert len(table) == 0
    assert image.vas.contents_hash() == before


def test_image_without_svc_words_scans_empty():
    spec, g = built(("guarded", "OPTEE"))
    image = load(g, spec)
    for r in image.code_regions():
        for o in range(0, r.length, 4):
            if isa.is_svc(int.from_bytes(r.data[o:o + 4], "little")):
                r.data[o:o + 4] = isa.NOP.to_bytes(4, "little")
    assert scan_svc_sites(image) == []


def test_far_site_is_out_of_branch_range():
    spec, g = built(("guarded", "OPTEE"))
    image = load(g, spec)
    site = scan_svc_sites(image)[0]
    far = image.vas.map((site.address + (48 << 20)) & ~0xFFF, 0x1000, "RX", TRAMPOLINE, "far")
    with pytest.raises(RangeExceeded):
        install_trampolines(image, [site], far)


def test_inverse_lookup(hdcp):
    spec, g = hdcp
    image = load(g, spec)
    table = rewrite(image)
    for addr, (tramp, ret) in table.entries.items():
        assert site_for_trampoline(table, tramp).address == addr
        assert ret == addr + 4
        with pytest.raises(UnknownTrampoline):
            site_for_trampoline(table, tramp + 4)
    assert len(patch_report(image, table).splitlines()) >= len(table)


def test_trampoline_returns_after_its_site(hdcp):
    spec, g = hdcp
    image = load(g, spec)
    table = rewrite(image)
    for addr, (tramp, _) in table.entries.items():
        patched = isa.decode(image.vas.read_word(addr))
        assert patched.op == "b" and patched.target(addr) == tramp
        back = isa.decode(image.vas.read_word(tramp + 12))
        assert back.op == "b" and back.target(tramp + 12) == addr + 4


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_patch_minimality(seed):
    """Rewriting changes only svc-site words and the trampoline region."""
    spec = random_spec(random.Random(seed))
    g = generate(spec)
    image = load(g, spec)
    before = {r.base: bytes(r.data) for r in image.vas.regions}
    table = rewrite(image)
    sites = set(table.entries)
    for r in image.vas.regions:
        if r is table.region:
            assert r.kind == TRAMPOLINE
            continue
        old, new = before[r.base], bytes(r.data)
        diff = {r.base + o for o in range(0, len(old), 4) if old[o:o + 4] != new[o:o + 4]}
        assert diff == {a for a in sites if r.contains(a)}
    assert len(table.region.data) >= len(sites) * TRAMPOLINE_SLOT


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_install_then_lookup_is_identity(seed):
    spec = random_spec(random.Random(seed))
    g = generate(spec)
    image = load(g, spec)
    sites = scan_svc_sites(image)
    table = install_trampolines(image, sites)
    assert [site_for_trampoline(table, t) for t, _ in table.entries.values()] == sites
    assert manifest_sites(image, g.manifest) == [(s.address, s.immediate) for s in sites]


def test_svc_site_fields():
    s = SvcSite(0x401040, 0, 0xD4000001)
    assert isa.svc_immediate(s.original_word) == s.immediate
