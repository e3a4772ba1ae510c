"""Fixed-width 32-bit instruction subset of the AArch64 A64 encoding.

Only the forms the engine interprets and the generator emits are covered:
add/sub (immediate and shifted register, flag-setting variants), logical
(immediate and shifted register), move-wide, bitfield moves (shift aliases),
two/three-source data processing (shifts by register, div, madd/msub),
load/store (unsigned offset, unscaled signed offset, register offset),
adr/adrp, b/bl, b.cond, cbz/cbnz, br/blr/ret, svc, hlt and nop.

Encodings match the architecture so an off-the-shelf disassembler agrees
with :func:`decode` on every word the encoders produce.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

M32 = 0xFFFF_FFFF
M64 = 0xFFFF_FFFF_FFFF_FFFF

SP = 31
ZR = 31
LR = 30

COND_NAMES = ("eq", "ne", "hs", "lo", "mi", "pl", "vs", "vc",
              "hi", "ls", "ge", "lt", "gt", "le", "al", "nv")
COND = {name: i for i, name in enumerate(COND_NAMES)}
COND["cs"] = COND["hs"]
COND["cc"] = COND["lo"]

SHIFT_LSL, SHIFT_LSR, SHIFT_ASR, SHIFT_ROR = range(4)

# terminator classes used by the engine, analyzer and rewriter
BRANCH_OPS = frozenset({"b", "bl", "bcond", "cbz", "cbnz", "br", "blr", "ret"})
FLAG_SETTERS = frozenset({"addsi", "subsi", "addsr", "subsr", "andsi", "andsr"})

# host gates understood by the engine inside trampoline regions
GATE_SAVE = 1
GATE_DISPATCH = 2
GATE_RESTORE = 3


class EncodeError(ValueError):
    pass


@dataclass(frozen=True, slots=True)
class Insn:
    """One decoded instruction word.

    ``imm`` holds the already-scaled immediate (byte offset for branches and
    memory offsets, decoded bitmask for logical immediates).
    """

    op: str
    word: int
    rd: int = 0
    rn: int = 0
    rm: int = 0
    ra: int = 0
    imm: int = 0
    sf: int = 1
    cond: int = 0
    size: int = 0
    shift: int = 0
    amount: int = 0
    immr: int = 0
    imms: int = 0
    signed: bool = False

    @property
    def is_branch(self) -> bool:
        return self.op in BRANCH_OPS

    def target(self, pc: int) -> int:
        """Absolute target of a pc-relative branch or adr."""
        if self.op == "adrp":
            return (pc & ~0xFFF) + self.imm
        return pc + self.imm


def _sx(value: int, bits: int) -> int:
    sign = 1 << (bits - 1)
    return (value & (sign - 1)) - (value & sign)


def _check(cond: bool, msg: str) -> None:
    if not cond:
        raise EncodeError(msg)


# ---------------------------------------------------------------------------
# encoders
# ---------------------------------------------------------------------------

def _reg(r: int) -> int:
    _check(0 <= r <= 31, f"bad register {r}")
    return r


def movz(rd, imm16, hw=0, sf=1):
    _check(0 <= imm16 <= 0xFFFF and 0 <= hw < (4 if sf else 2), "movz operand")
    return (sf << 31) | (0b10 << 29) | (0b100101 << 23) | (hw << 21) | (imm16 << 5) | _reg(rd)


def movn(rd, imm16, hw=0, sf=1):
    _check(0 <= imm16 <= 0xFFFF and 0 <= hw < (4 if sf else 2), "movn operand")
    return (sf << 31) | (0b00 << 29) | (0b100101 << 23) | (hw << 21) | (imm16 << 5) | _reg(rd)


def movk(rd, imm16, hw=0, sf=1):
    _check(0 <= imm16 <= 0xFFFF and 0 <= hw < (4 if sf else 2), "movk operand")
    return (sf << 31) | (0b11 << 29) | (0b100101 << 23) | (hw << 21) | (imm16 << 5) | _reg(rd)


def _addsub_imm(op, s, rd, rn, imm, sf):
    sh = 0
    if imm > 0xFFF:
        _check(imm & 0xFFF == 0 and imm >> 12 <= 0xFFF, f"imm {imm:#x} not encodable")
        imm >>= 12
        sh = 1
    _check(0 <= imm <= 0xFFF, f"imm {imm} not encodable")
    return ((sf << 31) | (op << 30) | (s << 29) | (0b100010 << 23) | (sh << 22)
            | (imm << 10) | (_reg(rn) << 5) | _reg(rd))


def add_imm(rd, rn, imm, sf=1):
    return _addsub_imm(0, 0, rd, rn, imm, sf)


def adds_imm(rd, rn, imm, sf=1):
    return _addsub_imm(0, 1, rd, rn, imm, sf)


def sub_imm(rd, rn, imm, sf=1):
    return _addsub_imm(1, 0, rd, rn, imm, sf)


def subs_imm(rd, rn, imm, sf=1):
    return _addsub_imm(1, 1, rd, rn, imm, sf)


def cmp_imm(rn, imm, sf=1):
    return subs_imm(ZR, rn, imm, sf)


def _addsub_reg(op, s, rd, rn, rm, shift, amount, sf):
    _check(shift in (SHIFT_LSL, SHIFT_LSR, SHIFT_ASR), "add/sub shift type")
    _check(0 <= amount < (64 if sf else 32), "shift amount")
    return ((sf << 31) | (op << 30) | (s << 29) | (0b01011 << 24) | (shift << 22)
            | (_reg(rm) << 16) | (amount << 10) | (_reg(rn) << 5) | _reg(rd))


def add_reg(rd, rn, rm, shift=0, amount=0, sf=1):
    return _addsub_reg(0, 0, rd, rn, rm, shift, amount, sf)


def adds_reg(rd, rn, rm, shift=0, amount=0, sf=1):
    return _addsub_reg(0, 1, rd, rn, rm, shift, amount, sf)


def sub_reg(rd, rn, rm, shift=0, amount=0, sf=1):
    return _addsub_reg(1, 0, rd, rn, rm, shift, amount, sf)


def subs_reg(rd, rn, rm, shift=0, amount=0, sf=1):
    return _addsub_reg(1, 1, rd, rn, rm, shift, amount, sf)


def cmp_reg(rn, rm, sf=1):
    return subs_reg(ZR, rn, rm, sf=sf)


_LOGIC_OPC = {"and": 0, "orr": 1, "eor": 2, "ands": 3}


def logic_reg(name, rd, rn, rm, shift=0, amount=0, invert=0, sf=1):
    opc = _LOGIC_OPC[name]
    _check(0 <= amount < (64 if sf else 32), "shift amount")
    return ((sf << 31) | (opc << 29) | (0b01010 << 24) | (shift << 22) | (invert << 21)
            | (_reg(rm) << 16) | (amount << 10) | (_reg(rn) << 5) | _reg(rd))


def mov_reg(rd, rm, sf=1):
    """mov rd, rm (orr rd, zr, rm); rd/rm must not be sp."""
    return logic_reg("orr", rd, ZR, rm, sf=sf)


def mov_sp(rd, rn):
    """mov to/from sp (add rd, rn, #0)."""
    return add_imm(rd, rn, 0)


def logic_imm(name, rd, rn, value, sf=1):
    enc = _bitmask_table(64 if sf else 32).get(value & (M64 if sf else M32))
    _check(enc is not None, f"{value:#x} is not a bitmask immediate")
    n, immr, imms = enc
    opc = _LOGIC_OPC[name]
    return ((sf << 31) | (opc << 29) | (0b100100 << 23) | (n << 22) | (immr << 16)
            | (imms << 10) | (_reg(rn) << 5) | _reg(rd))


def _bitfield(opc, rd, rn, immr, imms, sf):
    return ((sf << 31) | (opc << 29) | (0b100110 << 23) | (sf << 22) | (immr << 16)
            | (imms << 10) | (_reg(rn) << 5) | _reg(rd))


def lsl_imm(rd, rn, amount, sf=1):
    size = 64 if sf else 32
    _check(0 <= amount < size, "lsl amount")
    return _bitfield(0b10, rd, rn, (-amount) % size, size - 1 - amount, sf)


def lsr_imm(rd, rn, amount, sf=1):
    size = 64 if sf else 32
    _check(0 <= amount < size, "lsr amount")
    return _bitfield(0b10, rd, rn, amount, size - 1, sf)


def asr_imm(rd, rn, amount, sf=1):
    size = 64 if sf else 32
    _check(0 <= amount < size, "asr amount")
    return _bitfield(0b00, rd, rn, amount, size - 1, sf)


def ubfm(rd, rn, immr, imms, sf=1):
    return _bitfield(0b10, rd, rn, immr, imms, sf)


def sbfm(rd, rn, immr, imms, sf=1):
    return _bitfield(0b00, rd, rn, immr, imms, sf)


_DP2 = {"udiv": 0b000010, "sdiv": 0b000011, "lslv": 0b001000,
        "lsrv": 0b001001, "asrv": 0b001010}


def dp2(name, rd, rn, rm, sf=1):
    return ((sf << 31) | (0b11010110 << 21) | (_reg(rm) << 16) | (_DP2[name] << 10)
            | (_reg(rn) << 5) | _reg(rd))


def madd(rd, rn, rm, ra=ZR, sf=1):
    return ((sf << 31) | (0b11011 << 24) | (_reg(rm) << 16) | (_reg(ra) << 10)
            | (_reg(rn) << 5) | _reg(rd))


def msub(rd, rn, rm, ra, sf=1):
    return madd(rd, rn, rm, ra, sf) | (1 << 15)


def mul(rd, rn, rm, sf=1):
    return madd(rd, rn, rm, ZR, sf)


_SIZE_LOG = {1: 0, 2: 1, 4: 2, 8: 3}


def _ldst_opc(load, signed, size, dest64):
    if not load:
        return 0b00
    if not signed:
        return 0b01
    _check(size < 8, "signed load of doubleword")
    return 0b10 if dest64 else 0b11


def ldst(load, rt, rn, offset=0, size=8, signed=False, dest64=True):
    """Load/store with an unsigned scaled or signed unscaled offset."""
    lg = _SIZE_LOG[size]
    opc = _ldst_opc(load, signed, size, dest64)
    if offset >= 0 and offset % size == 0 and offset // size <= 0xFFF:
        return ((lg << 30) | (0b111 << 27) | (0b01 << 24) | (opc << 22)
                | ((offset // size) << 10) | (_reg(rn) << 5) | _reg(rt))
    _check(-256 <= offset <= 255, f"offset {offset} not encodable")
    return ((lg << 30) | (0b111 << 27) | (opc << 22) | ((offset & 0x1FF) << 12)
            | (_reg(rn) << 5) | _reg(rt))


def ldr(rt, rn, offset=0, size=8, signed=False, dest64=True):
    return ldst(True, rt, rn, offset, size, signed, dest64)


def str_(rt, rn, offset=0, size=8):
    return ldst(False, rt, rn, offset, size)


def ldst_reg(load, rt, rn, rm, size=8, scaled=True, signed=False, dest64=True):
    """Load/store with a 64-bit register offset (optionally LSL #log2(size))."""
    lg = _SIZE_LOG[size]
    opc = _ldst_opc(load, signed, size, dest64)
    s = 1 if scaled and size > 1 else 0
    return ((lg << 30) | (0b111 << 27) | (opc << 22) | (1 << 21) | (_reg(rm) << 16)
            | (0b011 << 13) | (s << 12) | (0b10 << 10) | (_reg(rn) << 5) | _reg(rt))


def adr(rd, offset):
    _check(-(1 << 20) <= offset < (1 << 20), "adr range")
    imm = offset & 0x1FFFFF
    return ((imm & 3) << 29) | (0b10000 << 24) | ((imm >> 2) << 5) | _reg(rd)


def adrp(rd, page_offset):
    _check(page_offset & 0xFFF == 0, "adrp offset must be page multiple")
    imm = (page_offset >> 12) & 0x1FFFFF
    return (1 << 31) | ((imm & 3) << 29) | (0b10000 << 24) | ((imm >> 2) << 5) | _reg(rd)


def b(offset):
    _check(offset % 4 == 0 and -(1 << 27) <= offset < (1 << 27), "b range")
    return (0b000101 << 26) | ((offset >> 2) & 0x3FFFFFF)


def bl(offset):
    return b(offset) | (1 << 31)


def b_cond(cond, offset):
    if isinstance(cond, str):
        cond = COND[cond]
    _check(offset % 4 == 0 and -(1 << 20) <= offset < (1 << 20), "b.cond range")
    return (0b01010100 << 24) | (((offset >> 2) & 0x7FFFF) << 5) | cond


def cbz(rt, offset, sf=1, nonzero=False):
    _check(offset % 4 == 0 and -(1 << 20) <= offset < (1 << 20), "cbz range")
    return ((sf << 31) | (0b011010 << 25) | (int(nonzero) << 24)
            | (((offset >> 2) & 0x7FFFF) << 5) | _reg(rt))


def cbnz(rt, offset, sf=1):
    return cbz(rt, offset, sf, nonzero=True)


def br(rn):
    return 0xD61F0000 | (_reg(rn) << 5)


def blr(rn):
    return 0xD63F0000 | (_reg(rn) << 5)


def ret(rn=LR):
    return 0xD65F0000 | (_reg(rn) << 5)


def svc(imm16=0):
    _check(0 <= imm16 <= 0xFFFF, "svc immediate")
    return 0xD4000001 | (imm16 << 5)


def hlt(imm16=0):
    _check(0 <= imm16 <= 0xFFFF, "hlt immediate")
    return 0xD4400000 | (imm16 << 5)


NOP = 0xD503201F


def is_svc(word: int) -> bool:
    return word & 0xFFE0001F == 0xD4000001


def svc_immediate(word: int) -> int:
    return (word >> 5) & 0xFFFF


# ---------------------------------------------------------------------------
# logical immediates
# ---------------------------------------------------------------------------

def _ror(value, amount, width):
    amount %= width
    mask = (1 << width) - 1
    return ((value >> amount) | (value << (width - amount))) & mask


def decode_bit_masks(n, imms, immr, datasize):
    """Return the wmask of a logical immediate, or None when reserved."""
    combined = (n << 6) | (~imms & 0x3F)
    if combined == 0:
        return None
    length = combined.bit_length() - 1
    if length < 1:
        return None
    if datasize == 32 and n:
        return None
    levels = (1 << length) - 1
    if imms & levels == levels:
        return None
    s = imms & levels
    r = immr & levels
    esize = 1 << length
    welem = (1 << (s + 1)) - 1
    elem = _ror(welem, r, esize)
    out = 0
    for i in range(datasize // esize):
        out |= elem << (i * esize)
    return out


@lru_cache(maxsize=2)
def _bitmask_table(datasize):
    table = {}
    for n in (0, 1) if datasize == 64 else (0,):
        for immr in range(datasize):
            for imms in range(64):
                v = decode_bit_masks(n, imms, immr, datasize)
                if v is not None and v not in table:
                    table[v] = (n, immr, imms)
    return table


def is_bitmask_imm(value, sf=1) -> bool:
    return (value & (M64 if sf else M32)) in _bitmask_table(64 if sf else 32)


# ---------------------------------------------------------------------------
# decoder
# ---------------------------------------------------------------------------

@lru_cache(maxsize=1 << 16)
def decode(word: int) -> Insn | None:
    """Decode one word; ``None`` for anything outside the subset."""
    w = word
    if w == NOP:
        return Insn("nop", w)
    top = w >> 24
    # ---- branches, exception generation, system ----
    if (w >> 26) & 0x1F == 0b00101:
        op = "bl" if w >> 31 else "b"
        return Insn(op, w, imm=_sx(w & 0x3FFFFFF, 26) * 4)
    if top == 0b01010100 and not (w >> 4) & 1:
        return Insn("bcond", w, cond=w & 0xF, imm=_sx((w >> 5) & 0x7FFFF, 19) * 4)
    if (w >> 25) & 0x3F == 0b011010:
        op = "cbnz" if (w >> 24) & 1 else "cbz"
        return Insn(op, w, rd=w & 0x1F, sf=w >> 31, imm=_sx((w >> 5) & 0x7FFFF, 19) * 4)
    if w & 0xFFFFFC1F in (0xD61F0000, 0xD63F0000, 0xD65F0000):
        op = {0xD61F0000: "br", 0xD63F0000: "blr", 0xD65F0000: "ret"}[w & 0xFFFFFC1F]
        return Insn(op, w, rn=(w >> 5) & 0x1F)
    if w & 0xFFE0001F == 0xD4000001:
        return Insn("svc", w, imm=(w >> 5) & 0xFFFF)
    if w & 0xFFE0001F == 0xD4400000:
        return Insn("hlt", w, imm=(w >> 5) & 0xFFFF)

    rd = w & 0x1F
    rn = (w >> 5) & 0x1F
    sf = w >> 31
    # ---- pc-relative addressing ----
    if (w >> 24) & 0x1F == 0b10000:
        imm = _sx((((w >> 5) & 0x7FFFF) << 2) | ((w >> 29) & 3), 21)
        if w >> 31:
            return Insn("adrp", w, rd=rd, imm=imm << 12)
        return Insn("adr", w, rd=rd, imm=imm)
    # ---- add/sub immediate ----
    if (w >> 23) & 0x3F == 0b100010:
        op = ("add", "sub")[(w >> 30) & 1]
        s = (w >> 29) & 1
        imm = ((w >> 10) & 0xFFF) << (12 if (w >> 22) & 1 else 0)
        return Insn(op + ("si" if s else "i"), w, rd=rd, rn=rn, imm=imm, sf=sf)
    # ---- logical immediate ----
    if (w >> 23) & 0x3F == 0b100100:
        n = (w >> 22) & 1
        immr = (w >> 16) & 0x3F
        imms = (w >> 10) & 0x3F
        if not sf and n:
            return None
        mask = decode_bit_masks(n, imms, immr, 64 if sf else 32)
        if mask is None:
            return None
        op = ("andi", "orri", "eori", "andsi")[(w >> 29) & 3]
        return Insn(op, w, rd=rd, rn=rn, imm=mask, sf=sf, immr=immr, imms=imms)
    # ---- move wide ----
    if (w >> 23) & 0x3F == 0b100101:
        opc = (w >> 29) & 3
        hw = (w >> 21) & 3
        if opc == 0b01 or (not sf and hw > 1):
            return None
        op = {0: "movn", 2: "movz", 3: "movk"}[opc]
        return Insn(op, w, rd=rd, imm=(w >> 5) & 0xFFFF, shift=hw * 16, sf=sf)
    # ---- bitfield ----
    if (w >> 23) & 0x3F == 0b100110:
        opc = (w >> 29) & 3
        n = (w >> 22) & 1
        if opc == 0b01 or opc == 0b11 or n != sf:
            return None
        immr = (w >> 16) & 0x3F
        imms = (w >> 10) & 0x3F
        if not sf and (immr > 31 or imms > 31):
            return None
        return Insn("sbfm" if opc == 0 else "ubfm", w, rd=rd, rn=rn, sf=sf, immr=immr, imms=imms)
    # ---- logical shifted register ----
    if (w >> 24) & 0x1F == 0b01010:
        amount = (w >> 10) & 0x3F
        if not sf and amount > 31:
            return None
        op = ("andr", "orrr", "eorr", "andsr")[(w >> 29) & 3]
        return Insn(op, w, rd=rd, rn=rn, rm=(w >> 16) & 0x1F, sf=sf,
                    shift=(w >> 22) & 3, amount=amount, signed=bool((w >> 21) & 1))
    # ---- add/sub shifted register ----
    if (w >> 24) & 0x1F == 0b01011 and not (w >> 21) & 1:
        shift = (w >> 22) & 3
        amount = (w >> 10) & 0x3F
        if shift == 3 or (not sf and amount > 31):
            return None
        op = ("add", "sub")[(w >> 30) & 1] + ("sr" if (w >> 29) & 1 else "r")
        return Insn(op, w, rd=rd, rn=rn, rm=(w >> 16) & 0x1F, sf=sf, shift=shift, amount=amount)
    # ---- data processing 2-source ----
    if (w >> 21) & 0x3FF == 0b0011010110:
        opcode = (w >> 10) & 0x3F
        name = {v: k for k, v in _DP2.items()}.get(opcode)
        if name is None:
            return None
        return Insn(name, w, rd=rd, rn=rn, rm=(w >> 16) & 0x1F, sf=sf)
    # ---- data processing 3-source (madd/msub only) ----
    if (w >> 21) & 0x3FF == 0b0011011000:
        op = "msub" if (w >> 15) & 1 else "madd"
        return Insn(op, w, rd=rd, rn=rn, rm=(w >> 16) & 0x1F, ra=(w >> 10) & 0x1F, sf=sf)
    # ---- loads and stores (integer registers) ----
    if (w >> 27) & 0x7 == 0b111 and not (w >> 26) & 1:
        size = 1 << (w >> 30)
        opc = (w >> 22) & 3
        if opc == 0b11 and size >= 4 or opc == 0b10 and size == 8:
            return None
        load = opc != 0
        signed = opc >= 2
        dest64 = opc == 0b10 or (opc == 0b01 and size == 8)
        common = dict(rd=rd, rn=rn, size=size, signed=signed, sf=int(dest64 or not load))
        kind = (w >> 24) & 3
        if kind == 0b01:
            return Insn("ldr" if load else "str", w, imm=((w >> 10) & 0xFFF) * size, **common)
        if kind == 0b00 and not (w >> 21) & 1 and (w >> 10) & 3 == 0:
            return Insn("ldr" if load else "str", w, imm=_sx((w >> 12) & 0x1FF, 9), **common)
        if kind == 0b00 and (w >> 21) & 1 and (w >> 10) & 3 == 0b10 and (w >> 13) & 7 == 0b011:
            s = (w >> 12) & 1
            return Insn("ldrr" if load else "strr", w, rm=(w >> 16) & 0x1F,
                        amount=(w >> 30) if s else 0, **common)
        return None
    return None


def mnemonic(insn: Insn) -> str:
    """Base mnemonic as an architectural disassembler would print it."""
    op = insn.op
    if op == "bcond":
        return "b." + COND_NAMES[insn.cond]
    if op in ("addi", "addr"):
        return "add"
    if op in ("subi", "subr"):
        return "sub"
    if op in ("addsi", "addsr"):
        return "adds"
    if op in ("subsi", "subsr"):
        return "subs"
    if op in ("andi", "andr"):
        return "bic" if insn.signed else "and"
    if op in ("orri", "orrr"):
        return "orn" if insn.signed else "orr"
    if op in ("eori", "eorr"):
        return "eon" if insn.signed else "eor"
    if op in ("andsi", "andsr"):
        return "bics" if insn.signed else "ands"
    if op in ("ldr", "ldrr", "str", "strr"):
        base = "ldr" if op.startswith("ldr") else "str"
        if base == "ldr" and insn.signed:
            base = "ldrs"
        return base + {1: "b", 2: "h", 4: "", 8: ""}[insn.size] + ("w" if insn.signed and insn.size == 4 else "")
    return op


def reads_writes(insn: Insn) -> tuple[tuple[int, ...], tuple[int, ...]]:
    """Architectural registers read and written (31 means sp or zr by form).

    Used by the analyzer; flags are reported as register 64.
    """
    op = insn.op
    FLAGS = 64
    if op in ("movz", "movn", "adr", "adrp"):
        return (), (insn.rd,)
    if op == "movk":
        return (insn.rd,), (insn.rd,)
    if op in ("addi", "subi", "ubfm", "sbfm"):
        return (insn.rn,), (insn.rd,)
    if op in ("addsi", "subsi", "andsi"):
        return (insn.rn,), (insn.rd, FLAGS)
    if op in ("andi", "orri", "eori"):
        return (insn.rn,), (insn.rd,)
    if op in ("addr", "subr", "andr", "orrr", "eorr", "udiv", "sdiv", "lslv", "lsrv", "asrv"):
        return (insn.rn, insn.rm), (insn.rd,)
    if op in ("addsr", "subsr", "andsr"):
        return (insn.rn, insn.rm), (insn.rd, FLAGS)
    if op in ("madd", "msub"):
        return (insn.rn, insn.rm, insn.ra), (insn.rd,)
    if op == "ldr":
        return (insn.rn,), (insn.rd,)
    if op == "ldrr":
        return (insn.rn, insn.rm), (insn.rd,)
    if op == "str":
        return (insn.rn, insn.rd), ()
    if op == "strr":
        return (insn.rn, insn.rm, insn.rd), ()
    if op == "bcond":
        return (FLAGS,), ()
    if op in ("cbz", "cbnz"):
        return (insn.rd,), ()
    if op in ("br", "ret"):
        return (insn.rn,), ()
    if op == "blr":
        return (insn.rn,), (LR,)
    if op == "bl":
        return (), (LR,)
    return (), ()


def writes_sp(insn: Insn) -> bool:
    """True when register 31 in the destination slot means sp."""
    return insn.op in ("addi", "subi") and insn.rd == 31


def reads_sp(insn: Insn) -> bool:
    """True when register 31 in the rn slot means sp."""
    return insn.op in ("addi", "subi", "addsi", "subsi", "ldr", "str", "ldrr", "strr")
