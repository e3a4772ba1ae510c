"""Translate straight-line runs of decoded instructions into Python functions.

A translated block takes no arguments; it reads and writes the register list
``R`` (0-30 general, 31 sp, 32 NZCV) bound in its globals and returns the
next pc.  Each instruction's code starts on its own source line so a fault
raised inside the block can be mapped back to the exact instruction.
"""

from __future__ import annotations

from . import isa
from .memory import ILLEGAL_INSN, MemFault

COND_TAKEN, UNCOND, CALL, RET, TRAP = range(5)
KIND_NAMES = ("COND_TAKEN", "UNCOND", "CALL", "RET", "TRAP")

FLAGS = 32
MAX_BLOCK = 48


def _cond_table():
    table = []
    for c in range(16):
        row = []
        for f in range(16):
            n, z, cf, v = f >> 3 & 1, f >> 2 & 1, f >> 1 & 1, f & 1
            base = c >> 1
            r = (z == 1, cf == 1, n == 1, v == 1,
                 cf == 1 and z == 0, n == v, n == v and z == 0, True)[base]
            if c & 1 and c != 15:
                r = not r
            row.append(r)
        table.append(tuple(row))
    return tuple(table)


COND_TABLE = _cond_table()


class Block:
    __slots__ = ("fn", "n", "lines", "code", "pc")

    def __init__(self, fn, n, lines, pc):
        self.fn = fn
        self.n = n
        self.lines = lines
        self.code = fn.__code__
        self.pc = pc


def _illegal(pc):
    def fn():
        raise MemFault(ILLEGAL_INSN, None)
    return fn


class Translator:
    """Per-state block builder; ``env`` is the globals dict blocks run in."""

    def __init__(self, env: dict, mask: int):
        self.env = env
        self.mask = mask

    def build(self, pc: int, fetch, max_len: int = MAX_BLOCK) -> Block:
        body: list[str] = []
        lines: dict[int, int] = {}
        i = 0
        cur = pc
        done = False
        while i < max_len and not done:
            try:
                word = fetch(cur)
            except MemFault:
                if i == 0:
                    raise
                break
            insn = isa.decode(word)
            if insn is None:
                if i == 0:
                    return Block(_illegal(pc), 1, {}, pc)
                break
            code, done = self.emit(insn, cur)
            code = code or ["pass"]
            for j in range(len(code)):
                lines[len(body) + 2 + j] = i
            body.extend(code)
            i += 1
            cur += 4
            if (cur & 0xFFF) == 0:
                break
        if not done:
            body.append(f"return {cur}")
        src = "def _b():\n" + "\n".join("    " + line for line in body) + "\n"
        ns: dict = {}
        exec(compile(src, f"<block {pc:#x}>", "exec"), self.env, ns)
        return Block(ns["_b"], i, lines, pc)

    # ---- helpers ----
    def _m(self, sf):
        return self.mask if sf else 0xFFFFFFFF

    @staticmethod
    def _r(r, sp=False):
        if r == 31:
            return "R[31]" if sp else "0"
        return f"R[{r}]"

    @staticmethod
    def _dst(r, sp=False):
        if r == 31 and not sp:
            return None
        return f"R[{r}]"

    def _assign(self, r, expr, sp=False):
        d = self._dst(r, sp)
        return [] if d is None else [f"{d} = {expr}"]

    def _shifted(self, insn, w, m):
        src = self._r(insn.rm)
        a = insn.amount
        if a == 0 and insn.shift != isa.SHIFT_ROR:
            e = src
        elif insn.shift == isa.SHIFT_LSL:
            e = f"(({src} << {a}) & {m})"
        elif insn.shift == isa.SHIFT_LSR:
            e = f"(({src} & {m}) >> {a})"
        elif insn.shift == isa.SHIFT_ASR:
            e = f"(((({src} & {m}) ^ {1 << (w - 1)}) - {1 << (w - 1)}) >> {a} & {m})"
        else:
            e = f"(((({src} & {m}) >> {a}) | ({src} << {w - a})) & {m})"
        if insn.signed:
            e = f"(~{e} & {m})"
        return e

    def _flags_sub(self, w):
        top = w - 1
        return (f"R[32] = ((r >> {top}) << 3) | ((r == 0) << 2) | ((a >= b) << 1) "
                f"| (((a ^ b) & (a ^ r)) >> {top} & 1)")

    def _flags_add(self, w, m):
        top = w - 1
        return (f"R[32] = ((r >> {top}) << 3) | ((r == 0) << 2) | ((t > {m}) << 1) "
                f"| ((~(a ^ b) & (a ^ r)) >> {top} & 1)")

    # ---- per instruction ----
    def emit(self, insn: isa.Insn, pc: int) -> tuple[list[str], bool]:
        op = insn.op
        sf = insn.sf
        m = self._m(sf)
        w = 64 if m > 0xFFFFFFFF else 32
        rd, rn = insn.rd, insn.rn
        amask = self.mask
        if op == "nop":
            return [], False
        if op == "movz":
            return self._assign(rd, str((insn.imm << insn.shift) & m)), False
        if op == "movn":
            return self._assign(rd, str(~(insn.imm << insn.shift) & m)), False
        if op == "movk":
            keep = m & ~(0xFFFF << insn.shift)
            return self._assign(rd, f"(R[{rd}] & {keep}) | {insn.imm << insn.shift}" if rd != 31 else "0"), False
        if op in ("addi", "subi"):
            sign = "+" if op == "addi" else "-"
            return self._assign(rd, f"({self._r(rn, True)} {sign} {insn.imm}) & {m}", sp=True), False
        if op in ("addsi", "subsi", "addsr", "subsr"):
            b = str(insn.imm) if op.endswith("i") else self._shifted(insn, w, m)
            a = f"{self._r(rn, op.endswith('i'))} & {m}"
            out = [f"a = {a}; b = {b}"]
            if op.startswith("add"):
                out += [f"t = a + b; r = t & {m}", self._flags_add(w, m)]
            else:
                out += [f"r = (a - b) & {m}", self._flags_sub(w)]
            out += self._assign(rd, "r")
            return out, False
        if op in ("addr", "subr"):
            sign = "+" if op == "addr" else "-"
            return self._assign(rd, f"({self._r(rn)} {sign} {self._shifted(insn, w, m)}) & {m}"), False
        if op in ("andi", "orri", "eori", "andsi"):
            pyop = {"andi": "&", "orri": "|", "eori": "^", "andsi": "&"}[op]
            expr = f"({self._r(rn)} {pyop} {insn.imm}) & {m}"
            if op == "andsi":
                return [f"r = {expr}", f"R[32] = ((r >> {w - 1}) << 3) | ((r == 0) << 2)"] + \
                    self._assign(rd, "r"), False
            return self._assign(rd, expr, sp=True), False
        if op in ("andr", "orrr", "eorr", "andsr"):
            pyop = {"andr": "&", "orrr": "|", "eorr": "^", "andsr": "&"}[op]
            expr = f"({self._r(rn)} {pyop} {self._shifted(insn, w, m)}) & {m}"
            if op == "andsr":
                return [f"r = {expr}", f"R[32] = ((r >> {w - 1}) << 3) | ((r == 0) << 2)"] + \
                    self._assign(rd, "r"), False
            return self._assign(rd, expr), False
        if op in ("ubfm", "sbfm"):
            return self._assign(rd, self._bitfield(insn, w, m)), False
        if op in ("udiv", "sdiv", "lslv", "lsrv", "asrv"):
            a, b = f"({self._r(rn)} & {m})", f"({self._r(insn.rm)} & {m})"
            if op == "udiv":
                return [f"b = {b}", "if b == 0: raise MemFault('DIV_ZERO', None)"] + \
                    self._assign(rd, f"{a} // b"), False
            if op == "sdiv":
                h = 1 << (w - 1)
                return [f"b = (({b} ^ {h}) - {h})", "if b == 0: raise MemFault('DIV_ZERO', None)",
                        f"a = (({a} ^ {h}) - {h})", "q = abs(a) // abs(b)",
                        "q = -q if (a < 0) != (b < 0) else q"] + self._assign(rd, f"q & {m}"), False
            if op == "lslv":
                return self._assign(rd, f"({a} << ({b} % {w})) & {m}"), False
            if op == "lsrv":
                return self._assign(rd, f"{a} >> ({b} % {w})"), False
            h = 1 << (w - 1)
            return self._assign(rd, f"((({a} ^ {h}) - {h}) >> ({b} % {w})) & {m}"), False
        if op in ("madd", "msub"):
            sign = "+" if op == "madd" else "-"
            prod = f"{self._r(rn)} * {self._r(insn.rm)}"
            return self._assign(rd, f"({self._r(insn.ra)} {sign} {prod}) & {m}"), False
        if op in ("ldr", "str", "ldrr", "strr"):
            return self._memory(insn, amask), False
        if op == "adr" or op == "adrp":
            return self._assign(rd, str(insn.target(pc) & amask)), False
        # ---- control flow ----
        nxt = pc + 4
        if op == "b":
            t = insn.target(pc) & amask
            return [f"T(({pc}, {t}, {UNCOND}))", f"return {t}"], True
        if op == "bl":
            t = insn.target(pc) & amask
            return [f"R[30] = {nxt}", f"T(({pc}, {t}, {CALL}))", f"return {t}"], True
        if op == "bcond":
            t = insn.target(pc) & amask
            if insn.cond >= 14:
                return [f"T(({pc}, {t}, {COND_TAKEN}))", f"return {t}"], True
            return [f"if CT{insn.cond}[R[32]]:", f"    T(({pc}, {t}, {COND_TAKEN}))", f"    return {t}",
                    f"return {nxt}"], True
        if op in ("cbz", "cbnz"):
            t = insn.target(pc) & amask
            test = "==" if op == "cbz" else "!="
            return [f"if ({self._r(rd)} & {m}) {test} 0:", f"    T(({pc}, {t}, {COND_TAKEN}))",
                    f"    return {t}", f"return {nxt}"], True
        if op in ("br", "blr", "ret"):
            kind = {"br": UNCOND, "blr": CALL, "ret": RET}[op]
            out = [f"t = {self._r(rn)} & {amask}"]
            if op == "blr":
                out.append(f"R[30] = {nxt}")
            return out + [f"T(({pc}, t, {kind}))", "return t"], True
        if op == "svc":
            return [f"return S.trap({pc}, {insn.word})"], True
        if op == "hlt":
            return [f"return S.gate({pc}, {insn.imm})"], True
        raise AssertionError(op)

    def _bitfield(self, insn, w, m):
        r, s = insn.immr, insn.imms
        src = f"({self._r(insn.rn)} & {m})"
        if s >= r:
            width = s - r + 1
            e = f"(({src} >> {r}) & {(1 << width) - 1})"
            top = width
        else:
            width = s + 1
            e = f"((({src} & {(1 << width) - 1}) << {w - r}) & {m})"
            top = w - r + width
        if insn.op == "sbfm" and top < w:
            h = 1 << (top - 1)
            e = f"((({e} ^ {h}) - {h}) & {m})"
        return e

    def _memory(self, insn, amask):
        size = insn.size
        base = self._r(insn.rn, True)
        if insn.op in ("ldr", "str"):
            addr = f"({base} + {insn.imm}) & {amask}" if insn.imm else f"{base} & {amask}"
        else:
            idx = self._r(insn.rm)
            idx = f"({idx} << {insn.amount})" if insn.amount else idx
            addr = f"({base} + {idx}) & {amask}"
        if insn.op.startswith("str"):
            return [f"st({addr}, {size}, {self._r(insn.rd)})"]
        val = f"ld({addr}, {size})"
        if insn.signed:
            dm = self.mask if insn.sf else 0xFFFFFFFF
            h = 1 << (size * 8 - 1)
            val = f"((({val} ^ {h}) - {h}) & {dm})"
        d = self._dst(insn.rd)
        return [f"{d} = {val}"] if d else [val]
