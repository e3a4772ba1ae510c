"""Replace every supervisor call with a branch to a per-site trampoline.

Each trampoline is four instructions inside the loader's TRAMPOLINE region::

    hlt #1        save the register context on the host side
    hlt #2        dispatch the syscall for this trampoline's site
    hlt #3        restore the context (x0 now holds the result)
    b   site+4

The ``hlt`` gates are only honoured inside the trampoline region; anywhere
else they are illegal instructions.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from . import isa
from .errors import RangeExceeded, RegionFull, UnknownTrampoline
from .loader import TRAMPOLINE_SLOT, LoadedImage
from .memory import Region

BRANCH_RANGE = 32 << 20


@dataclass(frozen=True)
class SvcSite:
    address: int
    immediate: int
    original_word: int


@dataclass
class TrampolineTable:
    entries: dict[int, tuple[int, int]] = field(default_factory=dict)
    region: Region | None = None
    sites: dict[int, SvcSite] = field(default_factory=dict)
    by_trampoline: dict[int, int] = field(default_factory=dict)

    def __len__(self):
        return len(self.entries)


def scan_svc_sites(image: LoadedImage) -> list[SvcSite]:
    """Every 4-aligned svc word in executable segments, ascending."""
    out = []
    for reg in sorted(image.code_regions(), key=lambda r: r.base):
        data = reg.data
        for o in range(0, reg.length, 4):
            w = int.from_bytes(data[o:o + 4], "little")
            if isa.is_svc(w):
                out.append(SvcSite(reg.base + o, isa.svc_immediate(w), w))
    return out


def trampoline_code(slot: int, site: int) -> list[int]:
    words = [isa.hlt(isa.GATE_SAVE), isa.hlt(isa.GATE_DISPATCH), isa.hlt(isa.GATE_RESTORE)]
    words.append(isa.b(site + 4 - (slot + 4 * len(words))))
    words += [isa.NOP] * (TRAMPOLINE_SLOT // 4 - len(words))
    return words


def install_trampolines(image: LoadedImage, sites: list[SvcSite],
                        region: Region | None = None) -> TrampolineTable:
    """Patch ``sites`` in place; the returned table maps site -> (trampoline, return)."""
    region = region or image.trampoline
    table = TrampolineTable(region=region)
    if not sites:
        return table
    if region is None:
        raise RegionFull("image has no trampoline region")
    if len(sites) * TRAMPOLINE_SLOT > region.length:
        raise RegionFull(f"{len(sites)} sites need {len(sites) * TRAMPOLINE_SLOT:#x} bytes, "
                         f"region holds {region.length:#x}")
    for i, site in enumerate(sites):
        slot = region.base + i * TRAMPOLINE_SLOT
        far = max(abs(slot - site.address), abs(site.address + 4 - (slot + 12)))
        if far >= BRANCH_RANGE:
            raise RangeExceeded(f"site {site.address:#x} is {far / (1 << 20):.1f} MiB from its trampoline")
    vas = image.vas
    for i, site in enumerate(sites):
        slot = region.base + i * TRAMPOLINE_SLOT
        code = b"".join(w.to_bytes(4, "little") for w in trampoline_code(slot, site.address))
        vas.poke(slot, code)
        image.patches.setdefault(site.address, site.original_word)
        vas.poke_int(site.address, 4, isa.b(slot - site.address))
        table.entries[site.address] = (slot, site.address + 4)
        table.sites[site.address] = site
        table.by_trampoline[slot] = site.address
    # the rewritten image must start from a clean dirty-page set
    vas.dirty.clear()
    return table


def site_for_trampoline(table: TrampolineTable, trampoline_addr: int) -> SvcSite:
    site = table.by_trampoline.get(trampoline_addr)
    if site is None:
        raise UnknownTrampoline(f"{trampoline_addr:#x} is not a trampoline entry")
    return table.sites[site]


def rewrite(image: LoadedImage) -> TrampolineTable:
    """scan + install, the usual one-shot entry point."""
    return install_trampolines(image, scan_svc_sites(image))


def patch_report(image: LoadedImage, table: TrampolineTable) -> str:
    lines = []
    for addr in sorted(table.entries):
        tramp, _ = table.entries[addr]
        lines.append(f"{addr:#010x} {table.sites[addr].original_word:08x} "
                     f"{image.vas.read_word(addr):08x} {tramp:#010x}")
    return "\n".join(lines) + ("\n" if lines else "")
