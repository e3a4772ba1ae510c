"""Minimal little-endian ELF32/ELF64 reader and writer for AArch64 objects.

The writer produces position-independent (ET_DYN) objects with two loadable
segments (text RX, data RW with trailing bss), a dynamic section carrying
DT_NEEDED entries and RELA relocations, a static symbol table and an optional
``.ta_meta`` key/value section.  The reader accepts anything laid out along
standard ELF rules, not only files the writer produced.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

from .errors import MalformedImage

EM_AARCH64 = 183
ET_EXEC, ET_DYN = 2, 3

PT_LOAD, PT_DYNAMIC, PT_GNU_STACK = 1, 2, 0x6474E551
PF_X, PF_W, PF_R = 1, 2, 4

SHT_PROGBITS, SHT_SYMTAB, SHT_STRTAB, SHT_RELA = 1, 2, 3, 4
SHT_DYNAMIC, SHT_NOBITS, SHT_DYNSYM = 6, 8, 11
SHF_WRITE, SHF_ALLOC, SHF_EXECINSTR = 1, 2, 4

STT_NOTYPE, STT_OBJECT, STT_FUNC = 0, 1, 2
STB_LOCAL, STB_GLOBAL = 0, 1

DT_NULL, DT_NEEDED, DT_STRTAB, DT_SYMTAB = 0, 1, 5, 6
DT_RELA, DT_RELASZ, DT_RELAENT, DT_STRSZ, DT_SYMENT, DT_SONAME = 7, 8, 9, 10, 11, 14

# relocation kinds, by class
RELOC_TYPES = {
    64: {"ABS": 257, "GLOB_DAT": 1025, "JUMP_SLOT": 1026, "RELATIVE": 1027},
    32: {"ABS": 1, "GLOB_DAT": 181, "JUMP_SLOT": 182, "RELATIVE": 183},
}
RELOC_NAMES = {bits: {v: k for k, v in t.items()} for bits, t in RELOC_TYPES.items()}

PAGE = 0x1000
TEXT_VADDR = 0x1000
META_SECTION = ".ta_meta"


def page_floor(x: int) -> int:
    return x & ~(PAGE - 1)


def page_ceil(x: int) -> int:
    return (x + PAGE - 1) & ~(PAGE - 1)


def _align(x: int, a: int) -> int:
    return (x + a - 1) & ~(a - 1)


@dataclass
class Segment:
    type: int
    flags: int
    offset: int
    vaddr: int
    filesz: int
    memsz: int
    align: int = PAGE


@dataclass
class Section:
    name: str
    type: int
    flags: int
    addr: int
    offset: int
    size: int
    link: int = 0
    info: int = 0
    align: int = 1
    entsize: int = 0


@dataclass
class Symbol:
    name: str
    value: int
    size: int
    type: int
    bind: int
    shndx: int

    @property
    def defined(self) -> bool:
        return self.shndx != 0


@dataclass
class Reloc:
    offset: int
    type: int
    symbol: str | None
    addend: int

    def kind(self, bits: int) -> str | None:
        return RELOC_NAMES[bits].get(self.type)


@dataclass
class ElfFile:
    bits: int
    etype: int
    machine: int
    entry: int
    segments: list[Segment]
    sections: list[Section]
    symbols: list[Symbol]
    dynsyms: list[Symbol]
    needed: list[str]
    soname: str | None
    relocs: list[Reloc]
    meta: dict[str, str]
    raw: bytes = field(repr=False, default=b"")

    @property
    def loads(self) -> list[Segment]:
        return [s for s in self.segments if s.type == PT_LOAD]

    @property
    def stack_size(self) -> int:
        for s in self.segments:
            if s.type == PT_GNU_STACK and s.memsz:
                return s.memsz
        return 0

    def section(self, name: str) -> Section | None:
        for s in self.sections:
            if s.name == name:
                return s
        return None

    def imports(self) -> list[str]:
        return [s.name for s in self.dynsyms if not s.defined and s.name]

    def exports(self) -> dict[str, int]:
        return {s.name: s.value for s in self.dynsyms
                if s.defined and s.bind == STB_GLOBAL and s.name}


# ---------------------------------------------------------------------------
# reader
# ---------------------------------------------------------------------------

class _Fmt:
    def __init__(self, bits):
        self.bits = bits
        if bits == 64:
            self.ehdr = struct.Struct("<16sHHIQQQIHHHHHH")
            self.phdr = struct.Struct("<IIQQQQQQ")
            self.shdr = struct.Struct("<IIQQQQIIQQ")
            self.sym = struct.Struct("<IBBHQQ")
            self.rela = struct.Struct("<QQq")
            self.dyn = struct.Struct("<qQ")
        else:
            self.ehdr = struct.Struct("<16sHHIIIIIHHHHHH")
            self.phdr = struct.Struct("<IIIIIIII")
            self.shdr = struct.Struct("<IIIIIIIIII")
            self.sym = struct.Struct("<IIIBBH")
            self.rela = struct.Struct("<IIi")
            self.dyn = struct.Struct("<iI")

    def unpack_phdr(self, buf, off):
        v = self.phdr.unpack_from(buf, off)
        if self.bits == 64:
            ptype, flags, offset, vaddr, _p, filesz, memsz, align = v
        else:
            ptype, offset, vaddr, _p, filesz, memsz, flags, align = v
        return Segment(ptype, flags, offset, vaddr, filesz, memsz, align)

    def pack_phdr(self, s: Segment):
        if self.bits == 64:
            return self.phdr.pack(s.type, s.flags, s.offset, s.vaddr, s.vaddr, s.filesz, s.memsz, s.align)
        return self.phdr.pack(s.type, s.offset, s.vaddr, s.vaddr, s.filesz, s.memsz, s.flags, s.align)

    def unpack_sym(self, buf, off):
        v = self.sym.unpack_from(buf, off)
        if self.bits == 64:
            name, info, _o, shndx, value, size = v
        else:
            name, value, size, info, _o, shndx = v
        return name, value, size, info & 0xF, info >> 4, shndx

    def pack_sym(self, name, value, size, stype, bind, shndx):
        info = (bind << 4) | stype
        if self.bits == 64:
            return self.sym.pack(name, info, 0, shndx, value, size)
        return self.sym.pack(name, value, size, info, 0, shndx)

    def rela_info(self, info):
        if self.bits == 64:
            return info >> 32, info & 0xFFFFFFFF
        return info >> 8, info & 0xFF

    def make_info(self, sym, rtype):
        return (sym << 32) | rtype if self.bits == 64 else (sym << 8) | rtype


def _cstr(buf: bytes, off: int) -> str:
    end = buf.find(b"\0", off)
    if off >= len(buf) or end < 0:
        raise MalformedImage(f"string offset {off:#x} out of range")
    return buf[off:end].decode("latin-1")


def parse_meta(blob: bytes) -> dict[str, str]:
    out = {}
    for line in blob.decode("utf-8", "replace").splitlines():
        line = line.strip()
        if not line or line.startswith("#") or "=" not in line:
            continue
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def parse_elf(data: bytes) -> ElfFile:
    """Parse an ELF image; raises :class:`MalformedImage` on any defect."""
    data = bytes(data)
    if len(data) < 16 or data[:4] != b"\x7fELF":
        raise MalformedImage("no ELF magic")
    ei_class, ei_data = data[4], data[5]
    if ei_class not in (1, 2):
        raise MalformedImage(f"bad ELF class {ei_class}")
    if ei_data != 1:
        raise MalformedImage("only little-endian images are supported")
    fmt = _Fmt(64 if ei_class == 2 else 32)
    if len(data) < fmt.ehdr.size:
        raise MalformedImage("truncated ELF header")
    (_ident, etype, machine, _ver, entry, phoff, shoff, _flags, _ehsize,
     phentsize, phnum, shentsize, shnum, shstrndx) = fmt.ehdr.unpack_from(data, 0)

    if phnum and (phentsize != fmt.phdr.size or phoff + phnum * phentsize > len(data)):
        raise MalformedImage("truncated program headers")
    segments = [fmt.unpack_phdr(data, phoff + i * phentsize) for i in range(phnum)]
    for s in segments:
        if s.type == PT_LOAD:
            if s.offset + s.filesz > len(data):
                raise MalformedImage(f"segment at {s.vaddr:#x} exceeds file")
            if s.filesz > s.memsz:
                raise MalformedImage("segment filesz > memsz")
    loads = sorted((s for s in segments if s.type == PT_LOAD), key=lambda s: s.vaddr)
    if not loads:
        raise MalformedImage("no loadable segments")
    for a, b in zip(loads, loads[1:]):
        if page_ceil(a.vaddr + a.memsz) > page_floor(b.vaddr):
            raise MalformedImage(f"segments at {a.vaddr:#x} and {b.vaddr:#x} overlap")

    sections: list[Section] = []
    if shnum:
        if shentsize != fmt.shdr.size or shoff + shnum * shentsize > len(data):
            raise MalformedImage("truncated section headers")
        raw = [fmt.shdr.unpack_from(data, shoff + i * shentsize) for i in range(shnum)]
        if shstrndx >= shnum:
            raise MalformedImage("bad section string table index")
        sstr = raw[shstrndx]
        names = data[sstr[4]:sstr[4] + sstr[5]]
        for (name, stype, flags, addr, offset, size, link, info, align, entsize) in raw:
            if stype != SHT_NOBITS and stype != 0 and offset + size > len(data):
                raise MalformedImage("section exceeds file")
            sections.append(Section(_cstr(names, name) if names else "", stype, flags, addr,
                                    offset, size, link, info, align, entsize))

    def read_syms(sec: Section) -> list[Symbol]:
        if sec.link >= len(sections):
            raise MalformedImage("bad symbol string table link")
        strs = sections[sec.link]
        sbuf = data[strs.offset:strs.offset + strs.size]
        out = []
        for i in range(sec.size // fmt.sym.size):
            name, value, size, stype, bind, shndx = fmt.unpack_sym(data, sec.offset + i * fmt.sym.size)
            out.append(Symbol(_cstr(sbuf, name), value, size, stype, bind, shndx))
        return out

    symbols, dynsyms = [], []
    relocs: list[Reloc] = []
    needed: list[str] = []
    soname = None
    meta: dict[str, str] = {}
    for sec in sections:
        if sec.type == SHT_SYMTAB:
            symbols = read_syms(sec)
        elif sec.type == SHT_DYNSYM:
            dynsyms = read_syms(sec)
        elif sec.name == META_SECTION:
            meta = parse_meta(data[sec.offset:sec.offset + sec.size])
    for sec in sections:
        if sec.type == SHT_RELA:
            table = read_syms(sections[sec.link]) if sec.link else dynsyms
            for i in range(sec.size // fmt.rela.size):
                off, info, addend = fmt.rela.unpack_from(data, sec.offset + i * fmt.rela.size)
                sidx, rtype = fmt.rela_info(info)
                if sidx >= max(len(table), 1) and sidx:
                    raise MalformedImage("relocation symbol index out of range")
                relocs.append(Reloc(off, rtype, table[sidx].name if sidx else None, addend))
        elif sec.type == SHT_DYNAMIC:
            strs = sections[sec.link]
            sbuf = data[strs.offset:strs.offset + strs.size]
            for i in range(sec.size // fmt.dyn.size):
                tag, val = fmt.dyn.unpack_from(data, sec.offset + i * fmt.dyn.size)
                if tag == DT_NULL:
                    break
                if tag == DT_NEEDED:
                    needed.append(_cstr(sbuf, val))
                elif tag == DT_SONAME:
                    soname = _cstr(sbuf, val)

    return ElfFile(fmt.bits, etype, machine, entry, segments, sections, symbols, dynsyms,
                   needed, soname, relocs, meta, data)


# ---------------------------------------------------------------------------
# writer
# ---------------------------------------------------------------------------

@dataclass
class SymDef:
    name: str
    section: str          # "text", "data" or "bss"
    offset: int
    size: int = 0
    type: int = STT_FUNC
    exported: bool = False


@dataclass
class RelocDef:
    offset: int           # offset inside the data section
    kind: str             # ABS / GLOB_DAT / JUMP_SLOT / RELATIVE
    symbol: str | None = None
    target: tuple[str, int] | None = None   # (section, offset) for RELATIVE
    addend: int = 0


@dataclass
class ElfSpec:
    bits: int = 64
    text: bytes = b""
    data: bytes = b""
    bss_size: int = 0
    symbols: list[SymDef] = field(default_factory=list)
    imports: list[str] = field(default_factory=list)
    needed: list[str] = field(default_factory=list)
    relocs: list[RelocDef] = field(default_factory=list)
    soname: str | None = None
    meta: dict[str, str] = field(default_factory=dict)
    stack_size: int = 0
    entry: tuple[str, int] | None = None


@dataclass
class Layout:
    text_vaddr: int
    data_vaddr: int          # start of the data segment (dynamic tables first)
    user_data_vaddr: int     # start of the caller's .data bytes
    bss_vaddr: int

    def addr(self, section: str, offset: int) -> int:
        base = {"text": self.text_vaddr, "data": self.user_data_vaddr, "bss": self.bss_vaddr}[section]
        return base + offset


class _StrTab:
    def __init__(self):
        self.buf = bytearray(b"\0")
        self.idx = {"": 0}

    def add(self, s: str) -> int:
        if s not in self.idx:
            self.idx[s] = len(self.buf)
            self.buf += s.encode() + b"\0"
        return self.idx[s]


def _dyn_parts(spec: ElfSpec):
    """Dynamic symbol table contents (order fixed by the spec)."""
    exported = [s for s in spec.symbols if s.exported]
    dstr = _StrTab()
    for n in spec.needed:
        dstr.add(n)
    if spec.soname:
        dstr.add(spec.soname)
    names = [s.name for s in exported] + list(spec.imports)
    for n in names:
        dstr.add(n)
    return exported, names, dstr


def _dyn_sizes(spec: ElfSpec):
    fmt = _Fmt(spec.bits)
    exported, names, dstr = _dyn_parts(spec)
    ndyn = len(spec.needed) + (1 if spec.soname else 0) + 8
    return (ndyn * fmt.dyn.size, (len(names) + 1) * fmt.sym.size, len(dstr.buf),
            len(spec.relocs) * fmt.rela.size)


def elf_layout(spec: ElfSpec) -> Layout:
    """Addresses the writer will assign; depends only on sizes and counts."""
    text_end = TEXT_VADDR + len(spec.text)
    data_vaddr = page_ceil(max(text_end, TEXT_VADDR + 4))
    dyn, dsym, dstr, rela = _dyn_sizes(spec)
    off = _align(dyn, 8) + _align(dsym, 8) + _align(dstr, 8) + _align(rela, 8)
    user = data_vaddr + _align(off, 16)
    bss = _align(user + len(spec.data), 16)
    return Layout(TEXT_VADDR, data_vaddr, user, bss)


def write_elf(spec: ElfSpec) -> bytes:
    fmt = _Fmt(spec.bits)
    lay = elf_layout(spec)
    rtypes = RELOC_TYPES[spec.bits]
    exported, dyn_names, dstr = _dyn_parts(spec)
    dyn_index = {n: i + 1 for i, n in enumerate(dyn_names)}

    # section indices (fixed order)
    SEC_TEXT, SEC_DATA, SEC_BSS = 1, 2, 3
    sec_of = {"text": SEC_TEXT, "data": SEC_DATA, "bss": SEC_BSS}

    # ---- dynamic tables ----
    dynsym = bytearray(fmt.pack_sym(0, 0, 0, 0, 0, 0))
    for s in exported:
        dynsym += fmt.pack_sym(dstr.add(s.name), lay.addr(s.section, s.offset), s.size,
                               s.type, STB_GLOBAL, sec_of[s.section])
    for n in spec.imports:
        dynsym += fmt.pack_sym(dstr.add(n), 0, 0, STT_FUNC, STB_GLOBAL, 0)
    rela = bytearray()
    for r in spec.relocs:
        if r.kind not in rtypes:
            raise ValueError(f"unknown relocation kind {r.kind}")
        sidx = 0
        addend = r.addend
        if r.symbol is not None:
            if r.symbol not in dyn_index:
                raise ValueError(f"relocation against unknown symbol {r.symbol}")
            sidx = dyn_index[r.symbol]
        if r.target is not None:
            addend += lay.addr(*r.target)
        rela += fmt.rela.pack(lay.user_data_vaddr + r.offset, fmt.make_info(sidx, rtypes[r.kind]), addend)

    dyn_sz, dsym_sz, dstr_sz, rela_sz = _dyn_sizes(spec)
    dyn_vaddr = lay.data_vaddr
    dsym_vaddr = dyn_vaddr + _align(dyn_sz, 8)
    dstr_vaddr = dsym_vaddr + _align(dsym_sz, 8)
    rela_vaddr = dstr_vaddr + _align(dstr_sz, 8)
    entries = [(DT_NEEDED, dstr.add(n)) for n in spec.needed]
    if spec.soname:
        entries.append((DT_SONAME, dstr.add(spec.soname)))
    entries += [(DT_STRTAB, dstr_vaddr), (DT_SYMTAB, dsym_vaddr), (DT_STRSZ, len(dstr.buf)),
                (DT_SYMENT, fmt.sym.size), (DT_RELA, rela_vaddr), (DT_RELASZ, len(rela)),
                (DT_RELAENT, fmt.rela.size), (DT_NULL, 0)]
    dynamic = b"".join(fmt.dyn.pack(t, v) for t, v in entries)
    assert len(dynamic) == dyn_sz and len(dynsym) == dsym_sz and len(dstr.buf) == dstr_sz

    # ---- file image ----
    text_off = TEXT_VADDR
    data_off = text_off + (lay.data_vaddr - TEXT_VADDR)
    seg = bytearray(lay.user_data_vaddr - lay.data_vaddr)
    def put(vaddr, blob):
        o = vaddr - lay.data_vaddr
        seg[o:o + len(blob)] = blob
    put(dyn_vaddr, dynamic)
    put(dsym_vaddr, dynsym)
    put(dstr_vaddr, dstr.buf)
    put(rela_vaddr, rela)
    seg += spec.data
    data_filesz = len(seg)
    data_memsz = (lay.bss_vaddr - lay.data_vaddr) + spec.bss_size

    out = bytearray(data_off)
    out[text_off:text_off + len(spec.text)] = spec.text
    out += seg

    # ---- static symbols, meta, section headers ----
    strtab = _StrTab()
    symtab = bytearray(fmt.pack_sym(0, 0, 0, 0, 0, 0))
    locals_ = [s for s in spec.symbols if not s.exported]
    globals_ = [s for s in spec.symbols if s.exported]
    for s in locals_ + globals_:
        symtab += fmt.pack_sym(strtab.add(s.name), lay.addr(s.section, s.offset), s.size, s.type,
                               STB_GLOBAL if s.exported else STB_LOCAL, sec_of[s.section])
    meta = "".join(f"{k}={v}\n" for k, v in spec.meta.items()).encode()

    shstr = _StrTab()
    def add_blob(blob, align=8):
        nonlocal out
        while len(out) % align:
            out.append(0)
        off = len(out)
        out += blob
        return off
    symtab_off = add_blob(symtab)
    strtab_off = add_blob(strtab.buf, 1)
    meta_off = add_blob(meta, 1)

    # indices: 0 null,1 text,2 data,3 bss,4 dynamic,5 dynsym,6 dynstr,7 rela,8 symtab,9 strtab,10 meta,11 shstrtab
    sec_list = [
        ("", 0, 0, 0, 0, 0, 0, 0, 0, 0),
        (".text", SHT_PROGBITS, SHF_ALLOC | SHF_EXECINSTR, lay.text_vaddr, text_off, len(spec.text), 0, 0, 4, 0),
        (".data", SHT_PROGBITS, SHF_ALLOC | SHF_WRITE, lay.user_data_vaddr,
         data_off + (lay.user_data_vaddr - lay.data_vaddr), len(spec.data), 0, 0, 16, 0),
        (".bss", SHT_NOBITS, SHF_ALLOC | SHF_WRITE, lay.bss_vaddr,
         data_off + (lay.bss_vaddr - lay.data_vaddr), spec.bss_size, 0, 0, 16, 0),
        (".dynamic", SHT_DYNAMIC, SHF_ALLOC | SHF_WRITE, dyn_vaddr, data_off, dyn_sz, 6, 0, 8, fmt.dyn.size),
        (".dynsym", SHT_DYNSYM, SHF_ALLOC, dsym_vaddr, data_off + (dsym_vaddr - lay.data_vaddr),
         dsym_sz, 6, 1, 8, fmt.sym.size),
        (".dynstr", SHT_STRTAB, SHF_ALLOC, dstr_vaddr, data_off + (dstr_vaddr - lay.data_vaddr),
         dstr_sz, 0, 0, 1, 0),
        (".rela.dyn", SHT_RELA, SHF_ALLOC, rela_vaddr, data_off + (rela_vaddr - lay.data_vaddr),
         rela_sz, 5, 0, 8, fmt.rela.size),
        (".symtab", SHT_SYMTAB, 0, 0, symtab_off, len(symtab), 9, len(locals_) + 1, 8, fmt.sym.size),
        (".strtab", SHT_STRTAB, 0, 0, strtab_off, len(strtab.buf), 0, 0, 1, 0),
        (META_SECTION, SHT_PROGBITS, 0, 0, meta_off, len(meta), 0, 0, 1, 0),
    ]
    for s in sec_list:
        shstr.add(s[0])
    shstr.add(".shstrtab")
    shstr_off = add_blob(shstr.buf, 1)
    sec_list.append((".shstrtab", SHT_STRTAB, 0, 0, shstr_off, len(shstr.buf), 0, 0, 1, 0))
    while len(out) % 8:
        out.append(0)
    shoff = len(out)
    for (name, stype, flags, addr, off, size, link, info, align, entsize) in sec_list:
        out += fmt.shdr.pack(shstr.add(name), stype, flags, addr, off, size, link, info, align, entsize)

    # ---- program headers (fit in the first page, before text) ----
    phdrs = [
        Segment(PT_LOAD, PF_R | PF_X, text_off, lay.text_vaddr, len(spec.text), len(spec.text)),
        Segment(PT_LOAD, PF_R | PF_W, data_off, lay.data_vaddr, data_filesz, data_memsz),
        Segment(PT_DYNAMIC, PF_R | PF_W, data_off, dyn_vaddr, dyn_sz, dyn_sz, 8),
        Segment(PT_GNU_STACK, PF_R | PF_W, 0, 0, 0, spec.stack_size, 16),
    ]
    phoff = fmt.ehdr.size
    ph = b"".join(fmt.pack_phdr(p) for p in phdrs)
    out[phoff:phoff + len(ph)] = ph
    entry = lay.addr(*spec.entry) if spec.entry else 0
    ident = b"\x7fELF" + bytes([2 if spec.bits == 64 else 1, 1, 1, 0]) + bytes(8)
    hdr = fmt.ehdr.pack(ident, ET_DYN, EM_AARCH64, 1, entry, phoff, shoff, 0, fmt.ehdr.size,
                        fmt.phdr.size, len(phdrs), fmt.shdr.size, len(sec_list), len(sec_list) - 1)
    out[0:len(hdr)] = hdr
    return bytes(out)
