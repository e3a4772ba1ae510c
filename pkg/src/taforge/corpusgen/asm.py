"""Label-resolving assembler over :mod:`taforge.isa`.

Every item is exactly one 4-byte word, so addresses are known after the
first pass regardless of where data symbols end up.  Items also remember
their control-flow role, which gives the generator its own block model
(used as ground truth for CFG edge counts and branch labels).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

from .. import isa

SIMPLE, COMPLEX = "SIMPLE", "COMPLEX"

Resolver = Callable[[str], int]


@dataclass
class Item:
    encode: Callable[[int, Resolver], int]
    ctl: tuple = ()
    note: str = ""


@dataclass
class Asm:
    sf: int = 1
    items: list[Item] = field(default_factory=list)
    labels: dict[str, int] = field(default_factory=dict)
    conds: dict[int, str] = field(default_factory=dict)     # item index -> SIMPLE/COMPLEX
    marks: dict[str, int] = field(default_factory=dict)     # named offsets (fault sites etc.)
    _uniq: int = 0

    # ---- bookkeeping ----
    @property
    def pc(self) -> int:
        return 4 * len(self.items)

    def fresh(self, stem: str) -> str:
        self._uniq += 1
        return f".{stem}{self._uniq}"

    def label(self, name: str):
        if name in self.labels:
            raise ValueError(f"duplicate label {name}")
        self.labels[name] = self.pc

    def mark(self, name: str):
        self.marks[name] = self.pc

    def _add(self, enc, ctl=(), note=""):
        self.items.append(Item(enc, ctl, note))

    def word(self, w: int, note: str = ""):
        self._add(lambda pc, r, w=w: w, note=note)

    def words(self, *ws: int):
        for w in ws:
            self.word(w)

    def _target(self, name: str, resolve: Resolver) -> int:
        if name in self.labels:
            return self.text_base + self.labels[name]
        return resolve(name)

    # ---- control flow ----
    def b(self, lbl: str):
        self._add(lambda pc, r: isa.b(self._target(lbl, r) - pc), ("b", lbl))

    def bl(self, lbl: str):
        self._add(lambda pc, r: isa.bl(self._target(lbl, r) - pc), ("call", lbl))

    def bcond(self, cond: str, lbl: str, cls: str):
        self.conds[len(self.items)] = cls
        self._add(lambda pc, r: isa.b_cond(cond, self._target(lbl, r) - pc), ("cond", lbl))

    def cbz(self, rt: int, lbl: str, cls: str, nonzero: bool = False, sf: int | None = None):
        sf = self.sf if sf is None else sf
        self.conds[len(self.items)] = cls
        self._add(lambda pc, r: isa.cbz(rt, self._target(lbl, r) - pc, sf, nonzero), ("cond", lbl))

    def cbnz(self, rt: int, lbl: str, cls: str, sf: int | None = None):
        self.cbz(rt, lbl, cls, nonzero=True, sf=sf)

    def ret(self):
        self._add(lambda pc, r: isa.ret(), ("ret",))

    def br(self, rn: int, targets: list[str] | None = None):
        self._add(lambda pc, r: isa.br(rn), ("br", tuple(targets or ())))

    def blr(self, rn: int, callee: str | None = None):
        self._add(lambda pc, r: isa.blr(rn), ("call", callee))

    def svc(self, imm: int):
        self._add(lambda pc, r: isa.svc(imm), ("svc",))

    # ---- addressing ----
    def adrp_add(self, rd: int, sym: str, addend: int = 0):
        """rd = &sym + addend (page + low 12 bits, like compiled PIC code)."""
        def hi(pc, r):
            t = self._target(sym, r) + addend
            return isa.adrp(rd, (t & ~0xFFF) - (pc & ~0xFFF))

        def lo(pc, r):
            t = self._target(sym, r) + addend
            return isa.add_imm(rd, rd, t & 0xFFF, sf=1)
        self._add(hi)
        self._add(lo)

    def load_sym(self, rt: int, sym: str, size: int, scratch: int | None = None, addend: int = 0):
        """rt = *(sym + addend) with an adrp/ldr pair."""
        base = rt if scratch is None else scratch

        def hi(pc, r):
            t = self._target(sym, r) + addend
            return isa.adrp(base, (t & ~0xFFF) - (pc & ~0xFFF))

        def lo(pc, r):
            t = self._target(sym, r) + addend
            if (t & 0xFFF) % size:
                raise isa.EncodeError(f"{sym} not {size}-aligned")
            return isa.ldr(rt, base, t & 0xFFF, size=size, dest64=size == 8 or self.sf == 1)
        self._add(hi)
        self._add(lo)

    def store_sym(self, rt: int, sym: str, size: int, scratch: int, addend: int = 0):
        """*(sym + addend) = rt with an adrp/str pair."""
        def hi(pc, r):
            t = self._target(sym, r) + addend
            return isa.adrp(scratch, (t & ~0xFFF) - (pc & ~0xFFF))

        def lo(pc, r):
            t = self._target(sym, r) + addend
            if (t & 0xFFF) % size:
                raise isa.EncodeError(f"{sym} not {size}-aligned")
            return isa.str_(rt, scratch, t & 0xFFF, size=size)
        self._add(hi)
        self._add(lo)

    def mov(self, rd: int, value: int, sf: int | None = None):
        """Fixed-length constant materialization (movz + movk per nonzero halfword)."""
        sf = self.sf if sf is None else sf
        width = 64 if sf else 32
        value &= (1 << width) - 1
        halves = [(value >> (16 * i)) & 0xFFFF for i in range(width // 16)]
        self.word(isa.movz(rd, halves[0], 0, sf))
        for i, h in enumerate(halves[1:], 1):
            if h:
                self.word(isa.movk(rd, h, i, sf))

    # ---- output ----
    text_base: int = 0

    def assemble(self, text_base: int, resolve: Resolver) -> bytes:
        self.text_base = text_base
        out = bytearray()
        for i, it in enumerate(self.items):
            out += it.encode(text_base + 4 * i, resolve).to_bytes(4, "little")
        return bytes(out)

    # ---- ground-truth block model ----
    def function_edges(self, start: str, end: str) -> set[tuple[int, int, str]]:
        """Intra-procedural edges of the code between labels ``start`` and ``end``.

        Blocks end at branches, calls, svc and returns, and before any label
        that a branch in the range targets.  Offsets are text-relative.
        """
        lo, hi = self.labels[start] // 4, self.labels[end] // 4
        leaders = {lo}
        for i in range(lo, hi):
            ctl = self.items[i].ctl
            if not ctl:
                continue
            if i + 1 < hi:
                leaders.add(i + 1)
            if ctl[0] in ("b", "cond"):
                t = self.labels.get(ctl[1])
                if t is not None and lo <= t // 4 < hi:
                    leaders.add(t // 4)
            elif ctl[0] == "br":
                for name in ctl[1]:
                    leaders.add(self.labels[name] // 4)
        order = sorted(leaders)
        edges = set()
        for k, s in enumerate(order):
            e = order[k + 1] if k + 1 < len(order) else hi
            last = e - 1
            ctl = self.items[last].ctl
            kind = ctl[0] if ctl else None
            if kind == "b":
                edges.add((4 * s, self.labels[ctl[1]], "UNCOND"))
            elif kind == "cond":
                edges.add((4 * s, self.labels[ctl[1]], "COND"))
                edges.add((4 * s, 4 * e, "FALLTHROUGH"))
            elif kind == "br":
                for name in ctl[1]:
                    edges.add((4 * s, self.labels[name], "INDIRECT"))
            elif kind == "ret":
                pass
            elif e < hi:
                edges.add((4 * s, 4 * e, "FALLTHROUGH"))
        return edges

    def branch_labels(self, start: int = 0, end: int | None = None) -> dict[int, str]:
        end = len(self.items) if end is None else end
        return {4 * i: c for i, c in self.conds.items() if start <= i < end}
