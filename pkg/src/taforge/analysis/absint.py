"""Forward abstract interpretation over one function of a recovered CFG.

Each register (and each tracked stack slot) holds an :class:`AV`: a flat
abstract value plus a ``mem`` bit saying whether it was derived from a load
through a non-stack pointer.  Joins keep equal values and go to TOP
otherwise; the ``mem`` bit joins by OR.  The same pass serves command-id
taint, global-access tracking and branch classification.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, NamedTuple

from .. import isa
from .cfg import INTRA, Cfg

FLAGS = 64
SP = 31


class AV(NamedTuple):
    kind: str          # const addr sp arg cmd load ret top
    a: object = None
    b: object = None
    mem: bool = False

    def with_mem(self, mem: bool) -> "AV":
        return self if self.mem == mem else self._replace(mem=mem)


TOP = AV("top")


def join(x: AV | None, y: AV | None) -> AV:
    if x is None:
        return y
    if y is None:
        return x
    if x[:3] == y[:3]:
        return x if x.mem or not y.mem else y
    return AV("top", mem=x.mem or y.mem)


@dataclass
class State:
    regs: dict[int, AV] = field(default_factory=dict)
    slots: dict[int, AV] = field(default_factory=dict)     # sp-relative offset -> value

    def copy(self) -> "State":
        return State(dict(self.regs), dict(self.slots))

    def get(self, r: int) -> AV:
        return self.regs.get(r, TOP)

    def join(self, other: "State") -> "State":
        regs = {r: join(self.regs.get(r), other.regs.get(r)) for r in set(self.regs) | set(other.regs)}
        slots = {o: join(self.slots.get(o), other.slots.get(o))
                 for o in set(self.slots) | set(other.slots)}
        return State(regs, slots)

    def __eq__(self, other):
        return self.regs == other.regs and self.slots == other.slots


def entry_state(args: dict[int, AV] | None = None, nargs: int = 8) -> State:
    st = State()
    for i in range(nargs):
        st.regs[i] = AV("arg", i)
    if args:
        st.regs.update(args)
    st.regs[SP] = AV("sp", 0)
    return st


@dataclass
class Access:
    """A memory access or call observed during interpretation."""
    pc: int
    kind: str          # load / store / call / svc
    addr: AV | None = None
    size: int = 0
    value: AV | None = None
    callee: int | None = None
    args: tuple[AV, ...] = ()


Hook = Callable[[int, isa.Insn, State], None]


def _mask(v: int, sf: int) -> int:
    return v & (isa.M64 if sf else isa.M32)


def _read(st: State, r: int, sp_form: bool) -> AV:
    if r == 31:
        return st.get(SP) if sp_form else AV("const", 0)
    return st.get(r)


def _arith(x: AV, y: AV, sub: bool, sf: int) -> AV:
    mem = x.mem or y.mem
    if x.kind == "const" and y.kind == "const":
        return AV("const", _mask(x.a - y.a if sub else x.a + y.a, sf), mem=mem)
    if y.kind == "const":
        d = -y.a if sub else y.a
        if x.kind in ("addr", "sp"):
            return AV(x.kind, x.a + d, mem=mem)
        if x.kind == "cmd":
            return AV("cmd", x.a + d, mem=mem)
    if x.kind == "const" and y.kind in ("addr", "sp") and not sub:
        return AV(y.kind, y.a + x.a, mem=mem)
    return AV("top", mem=mem)


def _offset(base: AV, imm: int) -> AV:
    return AV(base.kind, base.a + imm) if base.kind in ("addr", "sp") else base


def step(st: State, pc: int, ins: isa.Insn, width: int, on_access: Callable[[Access], None] | None,
         calls: dict[int, int | None] | None = None) -> None:
    """Apply one instruction to ``st`` in place."""
    op = ins.op
    rd = ins.rd
    sf = ins.sf

    def put(r, v):
        if r != 31:
            st.regs[r] = v

    if op == "movz":
        put(rd, AV("const", _mask(ins.imm << ins.shift, sf)))
    elif op == "movn":
        put(rd, AV("const", _mask(~(ins.imm << ins.shift), sf)))
    elif op == "movk":
        old = st.get(rd)
        if old.kind == "const":
            v = (old.a & ~(0xFFFF << ins.shift)) | (ins.imm << ins.shift)
            put(rd, AV("const", _mask(v, sf), mem=old.mem))
        else:
            put(rd, AV("top", mem=old.mem))
    elif op in ("adrp", "adr"):
        put(rd, AV("addr", ins.target(pc)))
    elif op in ("addi", "subi", "addsi", "subsi"):
        x = _read(st, ins.rn, True)
        v = _arith(x, AV("const", ins.imm), op.startswith("sub"), sf)
        if op in ("addsi", "subsi"):
            st.regs[FLAGS] = AV("cmp", x, AV("const", ins.imm), mem=x.mem)
            if rd != 31:
                put(rd, v)
        elif rd == 31:
            st.regs[SP] = v
        else:
            put(rd, v)
    elif op in ("addr", "subr", "addsr", "subsr"):
        x, y = _read(st, ins.rn, False), _read(st, ins.rm, False)
        if ins.amount:
            y = AV("top", mem=y.mem) if y.kind != "const" else AV("const", _mask(y.a << ins.amount, sf))
        v = _arith(x, y, op.startswith("sub"), sf)
        if op in ("addsr", "subsr"):
            st.regs[FLAGS] = AV("cmp", x, y, mem=x.mem or y.mem)
        put(rd, v)
    elif op == "orrr" and ins.rn == 31 and not ins.amount and not ins.signed:
        v = _read(st, ins.rm, False)
        if v.kind == "const":
            v = AV("const", _mask(v.a, sf), mem=v.mem)
        put(rd, v)
    elif op in ("andsi", "andsr"):
        x = _read(st, ins.rn, False)
        y = AV("const", ins.imm) if op == "andsi" else _read(st, ins.rm, False)
        st.regs[FLAGS] = AV("tst", x, y, mem=x.mem or y.mem)
        put(rd, AV("top", mem=x.mem or y.mem))
    elif op == "ldr":
        base = _read(st, ins.rn, True)
        if base.kind == "sp":
            v = st.slots.get(base.a + ins.imm, TOP)
        elif base.kind == "addr":
            v = AV("load", base.a + ins.imm, ins.size, mem=True)
        else:
            v = AV("top", mem=True)
        if on_access:
            on_access(Access(pc, "load", _offset(base, ins.imm), ins.size, v))
        put(rd, v)
    elif op == "ldrr":
        put(rd, AV("top", mem=True))
    elif op in ("str", "strr"):
        base = _read(st, ins.rn, True)
        val = _read(st, rd, False)
        if op == "str" and base.kind == "sp":
            off = base.a + ins.imm
            for o in [o for o in st.slots if o < off + ins.size and off < o + 8]:
                del st.slots[o]
            st.slots[off] = val
        elif op == "strr" and base.kind == "sp":
            st.slots.clear()
        if on_access:
            target = _offset(base, ins.imm) if op == "str" else AV("top")
            on_access(Access(pc, "store", target, ins.size, val))
    elif op in ("bl", "blr"):
        callee = ins.target(pc) if op == "bl" else (calls or {}).get(pc)
        args = tuple(st.get(i) for i in range(8))
        if on_access:
            on_access(Access(pc, "call", callee=callee, args=args))
        for r in list(range(19)) + [30, FLAGS]:
            st.regs.pop(r, None)
        st.regs[0] = AV("ret", callee, pc)
    elif op == "svc":
        args = tuple(st.get(i) for i in range(8))
        if on_access:
            on_access(Access(pc, "svc", value=AV("const", ins.imm), args=args))
        st.regs[0] = AV("ret", None, pc)
    elif op in ("cbz", "cbnz", "bcond", "b", "br", "ret", "nop", "hlt"):
        pass
    else:
        reads, writes = isa.reads_writes(ins)
        mem = any(_read(st, r, False).mem for r in reads if r != FLAGS)
        for r in writes:
            if r == FLAGS:
                st.regs[FLAGS] = AV("top", mem=mem)
            else:
                put(r, AV("top", mem=mem))


def analyze_function(cfg: Cfg, entry: int, init: State, width: int,
                     max_iter: int = 10000) -> dict[int, State]:
    """Fixpoint in-states for every block of the function at ``entry``."""
    blocks = cfg.functions[entry]
    call_sites = cfg.call_at
    ins_state: dict[int, State] = {entry: init}
    work = [entry]
    n = 0
    while work and n < max_iter:
        n += 1
        b = work.pop()
        st = ins_state[b].copy()
        for pc, ins in cfg.blocks[b].insns:
            if ins is not None:
                step(st, pc, ins, width, None, call_sites)
        for d, _ in cfg.succ(b, INTRA):
            if d not in blocks:
                continue
            old = ins_state.get(d)
            new = st if old is None else old.join(st)
            if old is None or new != old:
                ins_state[d] = new.copy()
                work.append(d)
    return ins_state


def replay_block(cfg: Cfg, block: int, st: State, width: int,
                 on_access: Callable[[Access], None] | None = None,
                 on_insn: Hook | None = None) -> State:
    """Walk one block from its in-state, reporting accesses; returns the out-state."""
    call_sites = cfg.call_at
    st = st.copy()
    for pc, ins in cfg.blocks[block].insns:
        if ins is None:
            continue
        if on_insn:
            on_insn(pc, ins, st)
        step(st, pc, ins, width, on_access, call_sites)
    return st
