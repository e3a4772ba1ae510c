"""Control-flow recovery by linear sweep over the loaded executable segments.

Blocks end at every branch, call, return and svc.  Jump tables are found by
the idiom bounds check + scaled indexed load + indirect branch and become
INDIRECT edges; GOT-indirect branches resolve through the loader's bound
relocation slots.  Anything else indirect is annotated, not guessed.
"""

from __future__ import annotations

import bisect
from dataclasses import dataclass, field

from .. import isa
from ..elf import STT_FUNC
from ..loader import LoadedImage

FALLTHROUGH, COND, UNCOND, CALL, RET, INDIRECT = ("FALLTHROUGH", "COND", "UNCOND", "CALL", "RET",
                                                 "INDIRECT")
EDGE_KINDS = (FALLTHROUGH, COND, UNCOND, CALL, RET, INDIRECT)
INTRA = frozenset({FALLTHROUGH, COND, UNCOND, INDIRECT})
ANALYSIS_INCOMPLETE = "ANALYSIS_INCOMPLETE"

_TERMINATORS = frozenset({"b", "bl", "bcond", "cbz", "cbnz", "br", "blr", "ret", "svc", "hlt"})


@dataclass
class Block:
    start: int
    insns: list[tuple[int, isa.Insn | None]]
    term: str = FALLTHROUGH
    annotations: set[str] = field(default_factory=set)

    @property
    def end(self) -> int:
        return self.start + 4 * len(self.insns)

    @property
    def last(self) -> isa.Insn | None:
        return self.insns[-1][1]

    @property
    def last_pc(self) -> int:
        return self.insns[-1][0]


@dataclass
class JumpTable:
    table: int
    index_reg: int
    targets: list[int]          # one per index
    bound_block: int | None
    default: int | None


@dataclass
class Cfg:
    image: LoadedImage
    blocks: dict[int, Block] = field(default_factory=dict)
    edges: set[tuple[int, int, str]] = field(default_factory=set)
    functions: dict[int, frozenset[int]] = field(default_factory=dict)
    names: dict[int, str] = field(default_factory=dict)
    jump_tables: dict[int, JumpTable] = field(default_factory=dict)
    calls: dict[int, int | None] = field(default_factory=dict)     # call block -> callee
    call_at: dict[int, int | None] = field(default_factory=dict, repr=False)   # call pc -> callee
    _starts: list[int] = field(default_factory=list, repr=False)
    _succ: dict[int, list[tuple[int, str]]] = field(default_factory=dict, repr=False)
    _pred: dict[int, list[tuple[int, str]]] = field(default_factory=dict, repr=False)

    def index(self):
        self._starts = sorted(self.blocks)
        self.call_at = {self.blocks[b].last_pc: c for b, c in self.calls.items()}
        self._succ, self._pred = {}, {}
        for s, d, k in self.edges:
            self._succ.setdefault(s, []).append((d, k))
            self._pred.setdefault(d, []).append((s, k))
        for v in self._succ.values():
            v.sort()
        for v in self._pred.values():
            v.sort()

    def succ(self, b: int, kinds=INTRA) -> list[tuple[int, str]]:
        return [(d, k) for d, k in self._succ.get(b, ()) if k in kinds]

    def pred(self, b: int, kinds=INTRA) -> list[tuple[int, str]]:
        return [(s, k) for s, k in self._pred.get(b, ()) if k in kinds]

    def block_of(self, addr: int) -> Block | None:
        i = bisect.bisect_right(self._starts, addr) - 1
        if i < 0:
            return None
        b = self.blocks[self._starts[i]]
        return b if addr < b.end else None

    def function_of(self, block: int) -> list[int]:
        return [f for f, bs in self.functions.items() if block in bs]

    def function_edges(self, entry: int) -> set[tuple[int, int, str]]:
        """Intra-procedural edges with both ends inside the function."""
        bs = self.functions[entry]
        return {(s, d, k) for s, d, k in self.edges if k in INTRA and s in bs and d in bs}

    def cond_blocks(self) -> list[int]:
        return [a for a, b in sorted(self.blocks.items()) if b.term == COND]

    def entry_named(self, name: str) -> int:
        for a, n in self.names.items():
            if n == name:
                return a
        raise KeyError(name)


# ---------------------------------------------------------------------------

def _direct_target(insn: isa.Insn, pc: int) -> int | None:
    if insn.op in ("b", "bl", "bcond", "cbz", "cbnz"):
        return insn.target(pc)
    return None


def _got_target(image: LoadedImage, insns: list[tuple[int, isa.Insn | None]], reg: int) -> int | None:
    """Value of ``reg`` at the end of the block when it was loaded from a bound GOT slot."""
    addr = None
    loaded_from = None
    for pc, ins in insns[:-1]:
        if ins is None:
            continue
        if ins.op == "adrp" and ins.rd == reg:
            addr, loaded_from = ins.target(pc), None
        elif ins.op == "addi" and ins.rd == reg and ins.rn == reg and addr is not None:
            addr += ins.imm
        elif ins.op == "ldr" and ins.rd == reg and ins.rn == reg and addr is not None:
            loaded_from, addr = addr + ins.imm, None
        elif reg in isa.reads_writes(ins)[1]:
            addr = loaded_from = None
    if loaded_from is None:
        return None
    bound = image.bound_slots.get(loaded_from)
    return None if bound is None else bound[1]


def _jump_table(image: LoadedImage, blocks: dict[int, Block], block: Block,
                preds: dict[int, list[int]]) -> JumpTable | None:
    """Match adrp/add T; ldr(sw) r,[T,idx,lsl #2]; add r,T,r; br r plus the bounds check."""
    ins = block.insns
    br = ins[-1][1]
    if br is None or br.op != "br" or len(ins) < 5:
        return None
    (_, add), (_, ld) = ins[-2], ins[-3]
    if add is None or ld is None or add.op != "addr" or ld.op != "ldrr" or ld.size != 4 or ld.amount != 2:
        return None
    if add.rd != br.rn or {add.rn, add.rm} != {ld.rn, ld.rd}:
        return None
    base_reg, idx = ld.rn, ld.rm
    table = None
    for pc, i in ins[:-3]:
        if i is None:
            continue
        if i.op == "adrp" and i.rd == base_reg:
            table = i.target(pc)
        elif i.op == "addi" and i.rd == base_reg and i.rn == base_reg and table is not None:
            table += i.imm
        elif base_reg in isa.reads_writes(i)[1]:
            table = None
    if table is None:
        return None
    # bounds check in the single fall-through predecessor
    count = default = bound_block = None
    for p in preds.get(block.start, ()):
        pb = blocks[p]
        last = pb.last
        if last is None or last.op != "bcond" or pb.end != block.start:
            continue
        cond = isa.COND_NAMES[last.cond]
        cmp = None
        for pc, i in reversed(pb.insns[:-1]):
            if i is not None and i.op == "subsi" and i.rd == 31 and i.rn == idx:
                cmp = i.imm
                break
            if i is not None and i.op == "subsr" and i.rd == 31 and i.rn == idx:
                cmp = _const_before(pb, i.rm)
                break
            if i is not None and idx in isa.reads_writes(i)[1]:
                break
        if cmp is None:
            continue
        if cond == "hi":
            count = cmp + 1
        elif cond == "hs":
            count = cmp
        else:
            continue
        default, bound_block = last.target(pb.last_pc), p
        break
    if count is None or count <= 0 or count > 1 << 16:
        return None
    try:
        raw = image.vas.peek(table, 4 * count)
    except Exception:
        return None
    targets = []
    mask = isa.M64 if image.word_width == 64 else isa.M32
    for k in range(count):
        off = int.from_bytes(raw[4 * k:4 * k + 4], "little", signed=True)
        targets.append((table + off) & mask)
    return JumpTable(table, idx, targets, bound_block, default)


def _const_before(block: Block, reg: int) -> int | None:
    val = None
    for pc, i in block.insns:
        if i is None:
            continue
        if i.op == "movz" and i.rd == reg:
            val = i.imm << i.shift
        elif i.op == "movk" and i.rd == reg and val is not None:
            val = (val & ~(0xFFFF << i.shift)) | (i.imm << i.shift)
        elif reg in isa.reads_writes(i)[1]:
            val = None
    return val


def function_entries(image: LoadedImage) -> dict[int, str]:
    """Named code addresses: function symbols of every object plus the entrypoints."""
    out: dict[int, str] = {}
    for obj in image.objects:
        for s in obj.elf.symbols + obj.elf.dynsyms:
            if s.defined and s.type == STT_FUNC and s.name:
                out.setdefault(obj.bias + s.value, s.name)
    for role, addr in image.entrypoints.items():
        out.setdefault(addr, role)
    return out


def recover_cfg(image: LoadedImage) -> Cfg:
    code = sorted(image.code_regions(), key=lambda r: r.base)
    words: dict[int, isa.Insn | None] = {}
    for reg in code:
        for a in range(reg.base, reg.end, 4):
            ins = isa.decode(image.original_word(a))
            if ins is not None:      # undecodable words are padding or data
                words[a] = ins
    named = function_entries(image)
    leaders = {r.base for r in code} | {a for a in named if a in words}
    for a, ins in words.items():
        if ins is None or ins.op in _TERMINATORS:
            if a + 4 in words:
                leaders.add(a + 4)
        if ins is not None:
            t = _direct_target(ins, a)
            if t is not None and t in words:
                leaders.add(t)
    cfg = Cfg(image)
    tables: dict[int, JumpTable] = {}
    while True:
        blocks = _split(words, leaders)
        preds: dict[int, list[int]] = {}
        for b in blocks.values():
            last = b.last
            if last is not None and last.op not in ("b", "br", "ret", "hlt") and b.end in blocks:
                preds.setdefault(b.end, []).append(b.start)
        new = set()
        tables = {}
        for b in blocks.values():
            jt = _jump_table(image, blocks, b, preds)
            if jt is not None:
                tables[b.start] = jt
                new |= {t for t in jt.targets if t in words} - leaders
        if not new:
            break
        leaders |= new
    cfg.blocks, cfg.jump_tables, cfg.names = blocks, tables, named
    _edges(cfg, words)
    _functions(cfg)
    _return_edges(cfg)
    cfg.index()
    return cfg


def _split(words, leaders) -> dict[int, Block]:
    blocks: dict[int, Block] = {}
    cur = None
    for a in sorted(words):
        ins = words[a]
        if cur is None or a in leaders or a != cur.end:
            cur = Block(a, [])
            blocks[a] = cur
        cur.insns.append((a, ins))
        if ins is None or ins.op in _TERMINATORS:
            cur = None
    return blocks


def _edges(cfg: Cfg, words):
    image = cfg.image
    for b in cfg.blocks.values():
        pc, ins = b.insns[-1]
        nxt = b.end if b.end in cfg.blocks else None
        if ins is None or ins.op == "hlt":
            b.term = "INVALID"
            continue
        op = ins.op
        if op in ("bcond", "cbz", "cbnz"):
            b.term = COND
            cfg.edges.add((b.start, ins.target(pc), COND))
            if nxt is not None:
                cfg.edges.add((b.start, nxt, FALLTHROUGH))
        elif op == "b":
            b.term = UNCOND
            cfg.edges.add((b.start, ins.target(pc), UNCOND))
        elif op in ("bl", "blr"):
            b.term = CALL
            callee = ins.target(pc) if op == "bl" else _got_target(image, b.insns, ins.rn)
            cfg.calls[b.start] = callee
            if callee is not None:
                cfg.edges.add((b.start, callee, CALL))
            else:
                b.annotations.add(ANALYSIS_INCOMPLETE)
            if nxt is not None:
                cfg.edges.add((b.start, nxt, FALLTHROUGH))
        elif op == "br":
            b.term = INDIRECT
            jt = cfg.jump_tables.get(b.start)
            if jt is not None:
                for t in set(jt.targets):
                    cfg.edges.add((b.start, t, INDIRECT))
            else:
                t = _got_target(image, b.insns, ins.rn)
                if t is None:
                    b.annotations.add(ANALYSIS_INCOMPLETE)
                else:
                    cfg.edges.add((b.start, t, INDIRECT))
        elif op == "ret":
            b.term = RET
        elif op == "svc":
            b.term = "SVC"
            if nxt is not None:
                cfg.edges.add((b.start, nxt, FALLTHROUGH))
        elif nxt is not None:
            cfg.edges.add((b.start, nxt, FALLTHROUGH))


def _functions(cfg: Cfg):
    entries = set(cfg.names) | {c for c in cfg.calls.values() if c is not None}
    entries &= set(cfg.blocks)
    succ: dict[int, list[int]] = {}
    for s, d, k in cfg.edges:
        if k in INTRA:
            succ.setdefault(s, []).append(d)
    covered: set[int] = set()

    def reach(e):
        seen = {e}
        stack = [e]
        while stack:
            b = stack.pop()
            for d in succ.get(b, ()):
                if d in cfg.blocks and d not in seen and d not in entries:
                    seen.add(d)
                    stack.append(d)
        return frozenset(seen)
    for e in sorted(entries):
        cfg.functions[e] = reach(e)
        covered |= cfg.functions[e]
    # orphan code (never called, never named) becomes its own root
    for a in sorted(cfg.blocks):
        if a not in covered:
            entries.add(a)
            cfg.functions[a] = reach(a)
            covered |= cfg.functions[a]


def _return_edges(cfg: Cfg):
    """ret block -> return site of every call into the function (through tail branches)."""
    returns_to: dict[int, set[int]] = {f: set() for f in cfg.functions}
    for blk, callee in cfg.calls.items():
        site = cfg.blocks[blk].end
        if callee in returns_to and site in cfg.blocks:
            returns_to[callee].add(site)
    tails: list[tuple[int, int]] = []
    for s, d, k in cfg.edges:
        if k in (UNCOND, INDIRECT) and d in cfg.functions:
            for f in _owners(cfg, s):
                if f != d:
                    tails.append((f, d))
    changed = True
    while changed:
        changed = False
        for f, g in tails:
            before = len(returns_to[g])
            returns_to[g] |= returns_to[f]
            changed |= len(returns_to[g]) != before
    for f, bs in cfg.functions.items():
        for b in bs:
            if cfg.blocks[b].term == RET:
                for site in returns_to[f]:
                    cfg.edges.add((b, site, RET))


def _owners(cfg: Cfg, block: int) -> list[int]:
    return [f for f, bs in cfg.functions.items() if block in bs]
