"""Map a TA into a fresh low-address space, link its libraries and locate
the TZOS-specific entrypoints."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

from . import elf as elfmod
from . import isa
from .elf import PF_R, PF_W, PF_X, ElfFile, parse_elf
from .errors import (EntryNotFound, MalformedImage, ResolverMiss, UnresolvedSymbol,
                     UnsupportedClass, WindowExhausted)
from .memory import (HOST_RETURN, SEGMENT, STACK, TRAMPOLINE, MapError, Region,
                     VirtualAddressSpace, page_ceil)
from .profiles import (COMMON_LIBRARY, DEFAULT_STACK_SIZE, META_PREFIX, STATIC_ONLY,
                       LayoutConfig, TzosProfile)

log = logging.getLogger(__name__)

TRAMPOLINE_SLOT = 64

Resolver = Callable[[str], bytes]


@dataclass
class LoadedObject:
    name: str
    elf: ElfFile
    bias: int
    regions: list[Region]

    @property
    def lo(self) -> int:
        return min(r.base for r in self.regions)

    @property
    def hi(self) -> int:
        return max(r.end for r in self.regions)


@dataclass
class LoadedImage:
    vas: VirtualAddressSpace
    profile: TzosProfile
    layout: LayoutConfig
    image_base: int
    word_width: int
    stack_top: int
    entrypoints: dict[str, int] = field(default_factory=dict)
    dependency_queue: list[str] = field(default_factory=list)
    symbols: dict[str, int] = field(default_factory=dict)
    objects: list[LoadedObject] = field(default_factory=list)
    pending: list[tuple[LoadedObject, elfmod.Reloc]] = field(default_factory=list)
    bound_slots: dict[int, tuple[str, int]] = field(default_factory=dict)
    meta: dict[str, str] = field(default_factory=dict)
    patches: dict[int, int] = field(default_factory=dict)
    trampoline: Region | None = None
    stack: Region | None = None

    @property
    def main(self) -> LoadedObject:
        return self.objects[0]

    @property
    def pointer_size(self) -> int:
        return 8 if self.word_width == 64 else 4

    @property
    def extent(self) -> tuple[int, int]:
        """[image_base, end) covering every loaded object and the trampolines."""
        hi = max(o.hi for o in self.objects)
        if self.trampoline is not None:
            hi = max(hi, self.trampoline.end)
        return self.image_base, hi

    def code_regions(self) -> list[Region]:
        return [r for r in self.vas.regions if r.x and r.kind == SEGMENT]

    def exec_regions(self) -> list[Region]:
        return [r for r in self.vas.regions if r.x]

    def original_word(self, addr: int) -> int:
        """Instruction word as loaded, before any rewriting."""
        if addr in self.patches:
            return self.patches[addr]
        return self.vas.read_word(addr)

    def symbol_at(self, addr: int) -> str | None:
        for name, a in self.symbols.items():
            if a == addr:
                return name
        return None

    def object_of(self, addr: int) -> LoadedObject | None:
        for o in self.objects:
            if any(r.contains(addr) for r in o.regions):
                return o
        return None


def _perms(flags: int) -> str:
    return ("R" if flags & PF_R else "") + ("W" if flags & PF_W else "") + ("X" if flags & PF_X else "")


def _map_object(vas: VirtualAddressSpace, name: str, ef: ElfFile, bias: int) -> LoadedObject:
    regions = []
    for seg in sorted(ef.loads, key=lambda s: s.vaddr):
        base = elfmod.page_floor(bias + seg.vaddr)
        end = page_ceil(bias + seg.vaddr + seg.memsz)
        data = bytearray(end - base)
        o = bias + seg.vaddr - base
        data[o:o + seg.filesz] = ef.raw[seg.offset:seg.offset + seg.filesz]
        try:
            regions.append(vas.map(base, end - base, _perms(seg.flags), SEGMENT, name, data))
        except MapError as e:
            raise MalformedImage(str(e)) from None
    return LoadedObject(name, ef, bias, regions)


def _object_span(ef: ElfFile) -> tuple[int, int]:
    lo = min(elfmod.page_floor(s.vaddr) for s in ef.loads)
    hi = max(page_ceil(s.vaddr + s.memsz) for s in ef.loads)
    return lo, hi


def _check_class(ef: ElfFile, profile: TzosProfile, what: str):
    if ef.machine != elfmod.EM_AARCH64:
        raise MalformedImage(f"{what}: machine {ef.machine} is not AArch64")
    if ef.bits not in profile.word_widths:
        raise UnsupportedClass(f"{what}: {ef.bits}-bit image, profile {profile.name} "
                               f"supports {profile.word_widths}")


def _relocate(image: LoadedImage, obj: LoadedObject, defer_imports: bool):
    """Apply relative relocations and bind symbols the object defines itself."""
    bits = obj.elf.bits
    width = 8 if bits == 64 else 4
    own = obj.elf.exports()
    for rel in obj.elf.relocs:
        kind = rel.kind(bits)
        where = obj.bias + rel.offset
        if kind is None:
            raise UnresolvedSymbol(f"{obj.name}: unsupported relocation type {rel.type} at {where:#x}")
        if kind == "RELATIVE":
            image.vas.poke_int(where, width, obj.bias + rel.addend)
        elif rel.symbol in own and rel.symbol not in image.symbols:
            image.vas.poke_int(where, width, obj.bias + own[rel.symbol] + rel.addend)
        elif rel.symbol in image.symbols and not defer_imports:
            _bind(image, obj, rel)
        else:
            image.pending.append((obj, rel))


def _bind(image: LoadedImage, obj: LoadedObject, rel: elfmod.Reloc):
    width = 8 if obj.elf.bits == 64 else 4
    where = obj.bias + rel.offset
    if rel.symbol not in image.symbols:
        raise UnresolvedSymbol(f"{obj.name}: no provider for {rel.symbol!r}")
    value = image.symbols[rel.symbol] + rel.addend
    image.vas.poke_int(where, width, value)
    image.bound_slots[where] = (rel.symbol, value)


def _merge_symbols(image: LoadedImage, obj: LoadedObject):
    for s in obj.elf.dynsyms + obj.elf.symbols:
        if s.defined and s.name and s.type in (elfmod.STT_FUNC, elfmod.STT_OBJECT, elfmod.STT_NOTYPE):
            image.symbols.setdefault(s.name, obj.bias + s.value)


def count_svc_words(image: LoadedImage) -> int:
    n = 0
    for r in image.code_regions():
        data = r.data
        for o in range(0, r.length, 4):
            if isa.is_svc(int.from_bytes(data[o:o + 4], "little")):
                n += 1
    return n


def reserve_trampolines(image: LoadedImage, sites: int | None = None) -> Region:
    """(Re)create the trampoline region next to the highest code segment."""
    if sites is None:
        sites = count_svc_words(image)
    if image.trampoline is not None:
        image.vas.unmap(image.trampoline)
        image.trampoline = None
    size = page_ceil(max(1, sites) * TRAMPOLINE_SLOT)
    top_code = max(r.end for r in image.code_regions())
    reg = image.vas.allocate(size, "RX", TRAMPOLINE, "trampolines", start=top_code)
    image.trampoline = reg
    return reg


def load_image(ta_bytes: bytes, profile: TzosProfile, layout: LayoutConfig | None = None) -> LoadedImage:
    """Parse and map a TA.  Dependencies are queued, not loaded."""
    layout = layout or LayoutConfig()
    ef = parse_elf(ta_bytes)
    _check_class(ef, profile, "TA")
    if ef.meta.get("encrypted", "0") not in ("0", "false", "no"):
        raise MalformedImage("encrypted TA images are not supported")
    lo, hi = layout.window_lo, layout.window_hi
    if ef.bits == 32 and hi > 1 << 32:
        hi = 1 << 32
    if lo <= HOST_RETURN:
        raise WindowExhausted("window must lie above the host return sentinel")
    vas = VirtualAddressSpace(lo, hi)
    span_lo, span_hi = _object_span(ef)
    # position-independent images are biased to the window start
    bias = 0 if ef.etype == elfmod.ET_EXEC else lo
    if bias + span_lo < lo or bias + span_hi > hi:
        raise WindowExhausted(f"image span {bias + span_lo:#x}-{bias + span_hi:#x} "
                              f"does not fit window {lo:#x}-{hi:#x}")
    obj = _map_object(vas, "ta", ef, bias)
    image = LoadedImage(vas, profile, layout, image_base=bias, word_width=ef.bits, stack_top=0,
                        meta=dict(ef.meta))
    image.objects.append(obj)
    _merge_symbols(image, obj)
    _relocate(image, obj, defer_imports=True)
    image.dependency_queue = list(ef.needed)

    stack_size = page_ceil(layout.stack_size or ef.stack_size or DEFAULT_STACK_SIZE)
    image.stack = vas.allocate(stack_size, "RW", STACK, "stack", from_top=True)
    image.stack_top = image.stack.end & ~0xF
    if not image.dependency_queue and not image.pending:
        reserve_trampolines(image)
    log.debug("loaded TA: %d regions, queue=%s", len(vas.regions), image.dependency_queue)
    return image


def dir_resolver(path: str | Path) -> Resolver:
    root = Path(path)

    def resolve(name: str) -> bytes:
        p = root / name
        if not p.is_file():
            raise ResolverMiss(f"library {name!r} not found in {root}")
        return p.read_bytes()
    return resolve


def dict_resolver(libs: dict[str, bytes]) -> Resolver:
    def resolve(name: str) -> bytes:
        if name not in libs:
            raise ResolverMiss(f"library {name!r} not provided")
        return libs[name]
    return resolve


def link_dependencies(image: LoadedImage, library_resolver: Resolver | None) -> LoadedImage:
    """Load queued libraries (transitively) and bind imported symbols."""
    if not image.dependency_queue and not image.pending:
        return image
    profile = image.profile
    loaded = {o.name for o in image.objects}
    while image.dependency_queue:
        name = image.dependency_queue.pop(0)
        if name in loaded:
            continue
        if library_resolver is None:
            raise ResolverMiss(f"library {name!r} needed but no resolver given")
        try:
            blob = library_resolver(name)
        except ResolverMiss:
            raise
        except (KeyError, OSError) as e:
            raise ResolverMiss(f"library {name!r}: {e}") from None
        if blob is None:
            raise ResolverMiss(f"library {name!r} not found")
        ef = parse_elf(blob)
        _check_class(ef, profile, name)
        if ef.bits != image.word_width:
            raise UnsupportedClass(f"{name}: {ef.bits}-bit library in {image.word_width}-bit image")
        span_lo, span_hi = _object_span(ef)
        if profile.dependency_policy == COMMON_LIBRARY:
            base = profile.common_library_base
        else:
            top = max(o.hi for o in image.objects)
            base = image.vas.find_free(span_hi - span_lo, start=top)
            if base is None:
                raise WindowExhausted(f"no room for library {name}")
        obj = _map_object(image.vas, name, ef, base - span_lo)
        image.objects.append(obj)
        loaded.add(name)
        _merge_symbols(image, obj)
        _relocate(image, obj, defer_imports=True)
        for dep in ef.needed:
            if dep not in loaded and dep not in image.dependency_queue:
                image.dependency_queue.append(dep)
        log.debug("linked %s at %#x", name, obj.lo)
    pending, image.pending = image.pending, []
    for obj, rel in pending:
        _bind(image, obj, rel)
    reserve_trampolines(image)
    return image


def resolve_entrypoints(image: LoadedImage, profile: TzosProfile | None = None) -> dict[str, int]:
    profile = profile or image.profile
    out = {}
    for role, sym in profile.entry_symbols:
        name = sym
        if sym.startswith(META_PREFIX):
            key = sym[len(META_PREFIX):]
            if key not in image.meta:
                raise EntryNotFound(f"metadata key {key!r} for role {role} missing")
            name = image.meta[key]
        if name.startswith("0x"):
            addr = image.image_base + int(name, 16)
        elif name in image.symbols:
            addr = image.symbols[name]
        else:
            raise EntryNotFound(f"{role}: symbol {name!r} not found")
        reg = image.vas.region_at(addr)
        if reg is None or not reg.x:
            raise EntryNotFound(f"{role}: {name} at {addr:#x} is not executable")
        out[role] = addr
    image.entrypoints = out
    return out


def load_ta(ta_bytes: bytes, profile: TzosProfile, layout: LayoutConfig | None = None,
            libs: Resolver | str | Path | dict | None = None) -> LoadedImage:
    """load_image + link_dependencies + resolve_entrypoints."""
    if isinstance(libs, (str, Path)):
        libs = dir_resolver(libs)
    elif isinstance(libs, dict):
        libs = dict_resolver(libs)
    image = load_image(ta_bytes, profile, layout)
    if image.dependency_queue or image.pending or profile.dependency_policy != STATIC_ONLY:
        link_dependencies(image, libs)
    resolve_entrypoints(image, profile)
    return image


def format_layout(image: LoadedImage) -> str:
    lines = [f"image_base {image.image_base:#010x} width W{image.word_width} "
             f"profile {image.profile.name} stack_top {image.stack_top:#010x}"]
    for base, length, perms, kind, name in image.vas.layout():
        lines.append(f"region {base:#010x} {base + length:#010x} {perms:<3} {kind:<10} {name}")
    for role, addr in image.entrypoints.items():
        lines.append(f"entry {role} {addr:#010x}")
    for dep in image.dependency_queue:
        lines.append(f"queued {dep}")
    return "\n".join(lines)
