"""Region-based virtual address space with permission-checked access."""

from __future__ import annotations

import hashlib
import itertools
from dataclasses import dataclass, field

from .errors import WindowExhausted

PAGE = 4096
PAGE_SHIFT = 12

SEGMENT, STACK, HEAP, TRAMPOLINE, DEVICE_SHM = "SEGMENT", "STACK", "HEAP", "TRAMPOLINE", "DEVICE_SHM"

OOB_READ = "OOB_READ"
OOB_WRITE = "OOB_WRITE"
EXEC_NX = "EXEC_NX"
UNALIGNED = "UNALIGNED"
ILLEGAL_INSN = "ILLEGAL_INSN"
DIV_ZERO = "DIV_ZERO"
FAULT_KINDS = (OOB_READ, OOB_WRITE, EXEC_NX, UNALIGNED, ILLEGAL_INSN, DIV_ZERO)

READ, WRITE, FETCH = "READ", "WRITE", "FETCH"

# never mapped; placed in the link register so returning to it ends a run
HOST_RETURN = 0x1000

_uids = itertools.count(1)


class MemFault(Exception):
    """Raised by checked accesses; the engine turns it into an ExitStatus."""

    def __init__(self, kind: str, addr: int | None = None):
        super().__init__(kind, addr)
        self.kind = kind
        self.addr = addr


class MapError(ValueError):
    pass


@dataclass(eq=False)
class Region:
    base: int
    length: int
    perms: str
    kind: str
    name: str = ""
    data: bytearray = field(default_factory=bytearray, repr=False)

    def __post_init__(self):
        if not self.data:
            self.data = bytearray(self.length)
        self.end = self.base + self.length
        self.r = "R" in self.perms
        self.w = "W" in self.perms
        self.x = "X" in self.perms

    def contains(self, addr: int) -> bool:
        return self.base <= addr < self.end


def page_ceil(n: int) -> int:
    return (n + PAGE - 1) & ~(PAGE - 1)


class VirtualAddressSpace:
    def __init__(self, window_lo: int, window_hi: int, page_size: int = PAGE):
        if page_size != PAGE:
            raise MapError("page size is fixed at 4096")
        self.window = (window_lo, window_hi)
        self.page_size = page_size
        self.regions: list[Region] = []
        self.pages: dict[int, Region] = {}
        self.dirty: set[int] = set()
        self.code_gen = 0
        self.uid = next(_uids)

    # ---- mapping ----
    def map(self, base: int, length: int, perms: str, kind: str, name: str = "",
            data: bytes | None = None) -> Region:
        if base % PAGE or length % PAGE or length <= 0:
            raise MapError(f"region {base:#x}+{length:#x} not page aligned")
        lo, hi = self.window
        if base < lo or base + length > hi:
            raise WindowExhausted(f"region {base:#x}+{length:#x} outside window {lo:#x}-{hi:#x}")
        for r in self.regions:
            if base < r.end and r.base < base + length:
                raise MapError(f"region {base:#x}+{length:#x} overlaps {r.name or r.kind}@{r.base:#x}")
        buf = bytearray(length)
        if data:
            buf[:len(data)] = data
        reg = Region(base, length, perms, kind, name, buf)
        self._insert(reg)
        return reg

    def _insert(self, reg: Region):
        self.regions.append(reg)
        self.regions.sort(key=lambda r: r.base)
        for p in range(reg.base >> PAGE_SHIFT, reg.end >> PAGE_SHIFT):
            self.pages[p] = reg
        if reg.x:
            self.code_gen += 1

    def unmap(self, reg: Region):
        self.regions.remove(reg)
        for p in range(reg.base >> PAGE_SHIFT, reg.end >> PAGE_SHIFT):
            self.pages.pop(p, None)
        if reg.x:
            self.code_gen += 1

    def rebuild_pages(self):
        self.pages = {}
        for reg in self.regions:
            for p in range(reg.base >> PAGE_SHIFT, reg.end >> PAGE_SHIFT):
                self.pages[p] = reg
        self.code_gen += 1

    def find_free(self, length: int, from_top: bool = False, start: int | None = None,
                  guard: int = PAGE) -> int | None:
        """First-fit search keeping ``guard`` unmapped bytes around the block."""
        length = page_ceil(length)
        lo, hi = self.window
        if start is not None:
            lo = max(lo, start)
        spans = [(r.base - guard, r.end + guard) for r in self.regions]
        if not from_top:
            cand = lo
            for s, e in sorted(spans):
                if cand + length <= s:
                    break
                cand = max(cand, e)
            return cand if cand + length <= hi else None
        cand = hi - length
        for s, e in sorted(spans, key=lambda x: -x[1]):
            if e <= cand:
                break
            if s < cand + length:
                cand = s - length
        return cand if cand >= lo else None

    def allocate(self, length: int, perms: str, kind: str, name: str = "",
                 from_top: bool = False, start: int | None = None) -> Region:
        base = self.find_free(length, from_top, start)
        if base is None:
            raise WindowExhausted(f"no room for {length:#x} bytes ({kind})")
        return self.map(base, page_ceil(length), perms, kind, name)

    def region_at(self, addr: int) -> Region | None:
        return self.pages.get(addr >> PAGE_SHIFT)

    # ---- unchecked access (loader, rewriter, tests) ----
    def peek(self, addr: int, n: int) -> bytes:
        reg = self.region_at(addr)
        if reg is None or addr + n > reg.end:
            raise MemFault(OOB_READ, addr)
        o = addr - reg.base
        return bytes(reg.data[o:o + n])

    def poke(self, addr: int, blob: bytes):
        reg = self.region_at(addr)
        if reg is None or addr + len(blob) > reg.end:
            raise MemFault(OOB_WRITE, addr)
        o = addr - reg.base
        reg.data[o:o + len(blob)] = blob
        if reg.x:
            self.code_gen += 1
        self._mark(addr, len(blob))

    def peek_int(self, addr: int, width: int) -> int:
        return int.from_bytes(self.peek(addr, width), "little")

    def poke_int(self, addr: int, width: int, value: int):
        self.poke(addr, (value & ((1 << (8 * width)) - 1)).to_bytes(width, "little"))

    def read_word(self, addr: int) -> int:
        return self.peek_int(addr, 4)

    # ---- checked access (engine, syscall handlers) ----
    def _mark(self, addr, n):
        p0 = addr >> PAGE_SHIFT
        p1 = (addr + n - 1) >> PAGE_SHIFT
        self.dirty.add(p0)
        if p1 != p0:
            self.dirty.update(range(p0 + 1, p1 + 1))

    def load(self, addr: int, width: int) -> int:
        reg = self.pages.get(addr >> PAGE_SHIFT)
        if reg is None or not reg.r or addr + width > reg.end:
            raise MemFault(OOB_READ, addr)
        o = addr - reg.base
        return int.from_bytes(reg.data[o:o + width], "little")

    def store(self, addr: int, width: int, value: int):
        reg = self.pages.get(addr >> PAGE_SHIFT)
        if reg is None or not reg.w or addr + width > reg.end:
            raise MemFault(OOB_WRITE, addr)
        o = addr - reg.base
        reg.data[o:o + width] = (value & ((1 << (width << 3)) - 1)).to_bytes(width, "little")
        p = addr >> PAGE_SHIFT
        self.dirty.add(p)
        if (addr + width - 1) >> PAGE_SHIFT != p:
            self.dirty.add(p + 1)
        if reg.x:
            self.code_gen += 1

    def read_bytes(self, addr: int, n: int) -> bytes:
        if n == 0:
            return b""
        reg = self.pages.get(addr >> PAGE_SHIFT)
        if reg is None or not reg.r or addr + n > reg.end:
            raise MemFault(OOB_READ, addr)
        o = addr - reg.base
        return bytes(reg.data[o:o + n])

    def write_bytes(self, addr: int, blob: bytes):
        if not blob:
            return
        reg = self.pages.get(addr >> PAGE_SHIFT)
        if reg is None or not reg.w or addr + len(blob) > reg.end:
            raise MemFault(OOB_WRITE, addr)
        o = addr - reg.base
        reg.data[o:o + len(blob)] = blob
        self._mark(addr, len(blob))
        if reg.x:
            self.code_gen += 1

    def read_cstr(self, addr: int, limit: int = 256) -> bytes:
        out = bytearray()
        for i in range(limit):
            c = self.load(addr + i, 1)
            if c == 0:
                break
            out.append(c)
        return bytes(out)

    def fetch(self, addr: int) -> int:
        if addr & 3:
            raise MemFault(UNALIGNED, addr)
        reg = self.pages.get(addr >> PAGE_SHIFT)
        if reg is None or not reg.x:
            raise MemFault(EXEC_NX, addr)
        o = addr - reg.base
        return int.from_bytes(reg.data[o:o + 4], "little")

    def access(self, addr: int, width: int, kind: str) -> int | None:
        if width not in (1, 2, 4, 8):
            raise ValueError(f"bad access width {width}")
        if kind == READ:
            return self.load(addr, width)
        if kind == WRITE:
            reg = self.pages.get(addr >> PAGE_SHIFT)
            if reg is None or not reg.w or addr + width > reg.end:
                raise MemFault(OOB_WRITE, addr)
            return None
        if kind == FETCH:
            if width != 4:
                raise MemFault(UNALIGNED, addr)
            return self.fetch(addr)
        raise ValueError(kind)

    # ---- inspection ----
    def layout(self) -> list[tuple[int, int, str, str, str]]:
        return [(r.base, r.length, r.perms, r.kind, r.name) for r in self.regions]

    def contents_hash(self, writable_only: bool = False) -> str:
        h = hashlib.sha256()
        for r in self.regions:
            if writable_only and not r.w:
                continue
            h.update(f"{r.base:x}:{r.length:x}:{r.perms}:{r.kind}|".encode())
            h.update(r.data)
        return h.hexdigest()

    def clone(self) -> "VirtualAddressSpace":
        other = VirtualAddressSpace(*self.window)
        for r in self.regions:
            other._insert(Region(r.base, r.length, r.perms, r.kind, r.name, bytearray(r.data)))
        return other
