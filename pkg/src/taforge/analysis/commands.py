"""Command-id recovery: switch-case idioms whose scrutinee is tainted by the
invoke entrypoint's command parameter.

Taint is seeded at the command register of the profile's parameter
convention and followed through moves, add/sub by constants, stack slots
and one level of calls out of the invoke entrypoint.  Compare-and-branch
ladders (``cmp``/``b.eq``, ``cbz``) and bounded jump tables over a tainted
value produce (value, handler) pairs; comparisons over anything else are
ignored, which is what drops decoy switches.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .. import isa
from .absint import AV, FLAGS, State, analyze_function, entry_state, replay_block
from .cfg import COND, Cfg

M32 = isa.M32


@dataclass(frozen=True, order=True)
class CommandId:
    value: int
    handler: int
    site: int


@dataclass
class CommandIdSet:
    ids: set[CommandId] = field(default_factory=set)
    default_handler: int | None = None

    @property
    def values(self) -> set[int]:
        return {c.value for c in self.ids}

    def handler_of(self, value: int) -> int | None:
        for c in self.ids:
            if c.value == value:
                return c.handler
        return None

    def by_value(self) -> dict[int, int]:
        return {c.value: c.handler for c in sorted(self.ids)}


@dataclass
class _Compare:
    value: int
    arm: int
    site: int
    miss: int | None      # successor taken when the comparison fails


def _cmd_delta(v: AV) -> int | None:
    return v.a if v.kind == "cmd" else None


def _block_compare(cfg: Cfg, b: int, st_end: State, st_before_term: State) -> _Compare | None:
    blk = cfg.blocks[b]
    pc, ins = blk.insns[-1]
    taken = ins.target(pc)
    fall = blk.end if blk.end in cfg.blocks else None
    if ins.op in ("cbz", "cbnz"):
        v = st_before_term.get(ins.rd) if ins.rd != 31 else AV("const", 0)
        d = _cmd_delta(v)
        if d is None:
            return None
        value = (-d) & M32
        return _Compare(value, taken, b, fall) if ins.op == "cbz" else _Compare(value, fall, b, taken)
    if ins.op != "bcond":
        return None
    f = st_before_term.get(FLAGS)
    if f.kind != "cmp":
        return None
    x, y = f.a, f.b
    if x.kind == "const" and y.kind == "cmd":
        x, y = y, x
    if x.kind != "cmd" or y.kind != "const":
        return None
    value = (y.a - x.a) & M32
    cond = isa.COND_NAMES[ins.cond]
    if cond == "eq":
        return _Compare(value, taken, b, fall)
    if cond == "ne":
        return _Compare(value, fall, b, taken)
    return None


def _scan(cfg: Cfg, entry: int, init: State, width: int, depth: int, out: CommandIdSet,
          compares: list[_Compare], seen: set):
    key = (entry, tuple(sorted((r, v) for r, v in init.regs.items() if r < 8)))
    if key in seen:
        return
    seen.add(key)
    states = analyze_function(cfg, entry, init, width)
    for b in sorted(states):
        blk = cfg.blocks[b]
        before = {}

        def snap(pc, ins, st):
            if pc == blk.last_pc:
                before["st"] = st.copy()
        end = replay_block(cfg, b, states[b], width, on_insn=snap)
        pre = before.get("st", end)
        if blk.term == COND:
            c = _block_compare(cfg, b, end, pre)
            if c is not None:
                compares.append(c)
        jt = cfg.jump_tables.get(b)
        if jt is not None:
            d = _cmd_delta(pre.get(jt.index_reg))
            if d is not None:
                for i, t in enumerate(jt.targets):
                    if t != jt.default:
                        out.ids.add(CommandId((i - d) & M32, t, b))
                if out.default_handler is None:
                    out.default_handler = jt.default
        if depth > 0 and b in cfg.calls and cfg.calls[b] in cfg.functions:
            args = {r: pre.get(r) for r in range(8)}
            if any(v.kind == "cmd" for v in args.values()):
                _scan(cfg, cfg.calls[b], entry_state(args), width, depth - 1, out, compares, seen)


def _ladder_default(cfg: Cfg, compares: list[_Compare]) -> int | None:
    sites = {c.site: c for c in compares}
    misses = {c.miss for c in compares}
    heads = [c for c in compares if c.site not in misses]
    if not heads:
        return None
    cur = min(heads, key=lambda c: c.site)
    hops = 0
    while cur is not None and hops <= len(compares):
        nxt = cur.miss
        if nxt in sites:
            cur = sites[nxt]
            hops += 1
            continue
        if nxt is None:
            return None
        blk = cfg.blocks[nxt]
        if len(blk.insns) == 1 and blk.last is not None and blk.last.op == "b":
            return blk.last.target(blk.last_pc)
        return nxt
    return None


def enumerate_command_ids(cfg: Cfg, invoke_entry: int, cmd_register: int | None = None,
                          depth: int = 1) -> CommandIdSet:
    image = cfg.image
    if cmd_register is None:
        cmd_register = image.profile.param_convention.cmd_register
    out = CommandIdSet()
    if invoke_entry not in cfg.functions:
        return out
    compares: list[_Compare] = []
    init = entry_state({cmd_register: AV("cmd", 0)})
    _scan(cfg, invoke_entry, init, image.word_width, depth, out, compares, set())
    for c in compares:
        if c.arm is not None:
            out.ids.add(CommandId(c.value, c.arm, c.site))
    if out.default_handler is None and compares:
        out.default_handler = _ladder_default(cfg, compares)
    return out


def arm_blocks(cfg: Cfg, ids: CommandIdSet) -> dict[int, set[int]]:
    """Blocks reachable from each arm that no other arm (or the default) reaches."""
    roots = {c.value: c.handler for c in ids.ids}
    if ids.default_handler is not None:
        roots[None] = ids.default_handler
    reach: dict[object, set[int]] = {}
    for v, h in roots.items():
        seen, stack = {h}, [h]
        while stack:
            b = stack.pop()
            for d, _ in cfg.succ(b):
                if d not in seen and d not in cfg.functions:
                    seen.add(d)
                    stack.append(d)
        reach[v] = seen
    count: dict[int, int] = {}
    for v, s in reach.items():
        for b in s:
            count[b] = count.get(b, 0) + 1
    owners_by_handler: dict[int, list] = {}
    for v, h in roots.items():
        owners_by_handler.setdefault(h, []).append(v)
    out: dict[int, set[int]] = {}
    for v, s in reach.items():
        if v is None:
            continue
        # arms sharing one handler address count once
        shared = len(owners_by_handler[roots[v]])
        out[v] = {b for b in s if count[b] == shared}
    return out


def handler_functions(cfg: Cfg, ids: CommandIdSet) -> dict[int, set[int]]:
    """Functions called (directly) from each command's private arm blocks."""
    out = {}
    for v, blocks in arm_blocks(cfg, ids).items():
        fs = {cfg.calls[b] for b in blocks if cfg.calls.get(b) in cfg.functions}
        out[v] = fs
    return out


__all__ = ["CommandId", "CommandIdSet", "enumerate_command_ids", "arm_blocks", "handler_functions"]
