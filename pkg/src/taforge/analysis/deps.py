"""Device-handle and context-memory dependencies between commands.

Each command's code is its private dispatcher arm plus every function
reachable from it by calls.  Syscall wrappers are not walked into; they are
summarized once (see :func:`syscall_helpers`) and their call sites are read
as "helper H called with these abstract arguments".

Device flow: an ``open`` whose path argument is a string constant returns a
handle; when that handle is stored to a global, any command that passes a
load of the same global as the first argument of ``read``/``write``/``ioctl``
depends on the opener.

Memory flow: the context object is the data symbol most often used as a
``mem_move`` base across commands.  Helper copies into it and direct stores
inside it are writes; copies out of it and direct loads are reads.  Any
write range overlapping a read range of another command gives an edge.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field

from ..elf import STT_OBJECT
from ..syscalls import REGISTER, SyscallTable, table_for
from .absint import AV, Access, State, analyze_function, entry_state, replay_block
from .cfg import INDIRECT, UNCOND, Cfg
from .commands import CommandIdSet, arm_blocks

DEVICE_FD, CONTEXT_MEMORY = "DEVICE_FD", "CONTEXT_MEMORY"
FD_USERS = ("read", "write", "ioctl")
MAX_PATH = 256


@dataclass
class ContextField:
    offset: int
    width: int
    writers: set[int] = field(default_factory=set)
    readers: set[int] = field(default_factory=set)


@dataclass
class DependencyGraph:
    nodes: set[int] = field(default_factory=set)
    edges: set[tuple[int, int, str]] = field(default_factory=set)
    context_fields: list[ContextField] = field(default_factory=list)
    context_object: tuple[int, int] | None = None      # (address, size)

    def merge(self, other: "DependencyGraph") -> "DependencyGraph":
        return DependencyGraph(self.nodes | other.nodes, self.edges | other.edges,
                               self.context_fields or other.context_fields,
                               self.context_object or other.context_object)

    def prereqs(self, cmd: int) -> set[int]:
        return {a for a, b, _ in self.edges if b == cmd}


# ---------------------------------------------------------------------------
# syscall helper recognition
# ---------------------------------------------------------------------------

def _svc_names(cfg: Cfg, entry: int, init: State, table: SyscallTable, depth: int,
               seen: set[int]) -> set[str]:
    if entry in seen or entry not in cfg.functions:
        return set()
    seen = seen | {entry}
    width = cfg.image.word_width
    states = analyze_function(cfg, entry, init, width)
    names: set[str] = set()
    for b in states:
        hits: list[Access] = []
        end = replay_block(cfg, b, states[b], width, hits.append)
        for acc in hits:
            if acc.kind == "call":
                names.add("?call")
            elif acc.kind == "svc":
                if table.number_source == REGISTER:
                    num = acc.args[table.number_register] if table.number_register < 8 else None
                    names.add(table.handler_for(num.a) if num is not None and num.kind == "const"
                              else "?")
                else:
                    names.add(table.handler_for(acc.value.a))
        if depth > 0:
            for d, k in cfg.succ(b):
                if k in (UNCOND, INDIRECT) and d in cfg.functions and d != entry:
                    names |= _svc_names(cfg, d, end, table, depth - 1, seen)
    return names


def syscall_helpers(cfg: Cfg, table: SyscallTable | None = None, depth: int = 3) -> dict[int, str]:
    """Function entry -> syscall handler name, for call-free functions that end up
    in exactly one syscall (directly or through tail branches into libraries)."""
    table = table or table_for(cfg.image.profile)
    out = {}
    for entry in cfg.functions:
        names = _svc_names(cfg, entry, entry_state(), table, depth, set())
        if len(names) == 1:
            (name,) = names
            if not name.startswith("?"):
                out[entry] = name
    return out


# ---------------------------------------------------------------------------
# per-command effects
# ---------------------------------------------------------------------------

@dataclass
class HelperCall:
    pc: int
    name: str
    args: tuple[AV, ...]


@dataclass
class Effects:
    calls: list[HelperCall] = field(default_factory=list)
    loads: list[tuple[int, int]] = field(default_factory=list)       # (address, width)
    stores: list[tuple[int, int, AV]] = field(default_factory=list)  # (address, width, value)


def _collect(cfg: Cfg, helpers: dict[int, str], table: SyscallTable, eff: Effects,
             todo: list[int]):
    def on_access(acc: Access):
        if acc.kind == "call":
            if acc.callee in helpers:
                eff.calls.append(HelperCall(acc.pc, helpers[acc.callee], acc.args))
            elif acc.callee in cfg.functions:
                todo.append(acc.callee)
        elif acc.kind == "svc":
            if table.number_source == REGISTER:
                num = acc.args[table.number_register]
                name = table.handler_for(num.a) if num.kind == "const" else "unsupported"
            else:
                name = table.handler_for(acc.value.a)
            eff.calls.append(HelperCall(acc.pc, name, acc.args))
        elif acc.addr is not None and acc.addr.kind == "addr":
            if acc.kind == "load":
                eff.loads.append((acc.addr.a, acc.size))
            else:
                eff.stores.append((acc.addr.a, acc.size, acc.value))
    return on_access


def command_effects(cfg: Cfg, ids: CommandIdSet, helpers: dict[int, str] | None = None
                    ) -> dict[int, Effects]:
    """Helper calls and global accesses made by each command's code."""
    table = table_for(cfg.image.profile)
    if helpers is None:
        helpers = syscall_helpers(cfg, table)
    width = cfg.image.word_width
    fn_cache: dict[int, dict[int, State]] = {}

    def states_of(f):
        if f not in fn_cache:
            fn_cache[f] = analyze_function(cfg, f, entry_state(), width)
        return fn_cache[f]

    owners: dict[int, int] = {}
    for f, bs in sorted(cfg.functions.items()):
        for b in bs:
            owners.setdefault(b, f)
    out: dict[int, Effects] = {}
    for cmd, blocks in arm_blocks(cfg, ids).items():
        eff = Effects()
        todo: list[int] = []
        hook = _collect(cfg, helpers, table, eff, todo)
        for b in sorted(blocks):
            st = states_of(owners[b]).get(b)
            if st is not None:
                replay_block(cfg, b, st, width, hook)
        done: set[int] = set()
        while todo:
            f = todo.pop()
            if f in done or f in helpers:
                continue
            done.add(f)
            states = states_of(f)
            for b in sorted(states):
                replay_block(cfg, b, states[b], width, hook)
        out[cmd] = eff
    return out


# ---------------------------------------------------------------------------
# device dependencies
# ---------------------------------------------------------------------------

def _cstring(image, addr: int) -> str | None:
    try:
        raw = image.vas.peek(addr, MAX_PATH)
    except Exception:
        return None
    end = raw.find(b"\0")
    if end <= 0:
        return None
    try:
        return raw[:end].decode()
    except UnicodeDecodeError:
        return None


def _handle_stores(eff: Effects) -> dict[int, int]:
    """open call pc -> global address its result was stored to."""
    opens = {c.pc for c in eff.calls if c.name == "open"}
    out = {}
    for addr, _, v in eff.stores:
        if v is not None and v.kind == "ret" and v.b in opens:
            out[v.b] = addr
    return out


def analyze_device_dependencies(cfg: Cfg, ids: CommandIdSet,
                                effects: dict[int, Effects] | None = None) -> DependencyGraph:
    effects = effects if effects is not None else command_effects(cfg, ids)
    g = DependencyGraph(nodes=set(ids.values))
    openers: dict[int, set[int]] = {}      # handle global -> commands that open into it
    for cmd, eff in effects.items():
        stored = _handle_stores(eff)
        for c in eff.calls:
            if c.name != "open" or c.pc not in stored:
                continue
            path = c.args[0]
            if path.kind == "addr" and _cstring(cfg.image, path.a) is not None:
                openers.setdefault(stored[c.pc], set()).add(cmd)
    for cmd, eff in effects.items():
        for c in eff.calls:
            if c.name in FD_USERS and c.args[0].kind == "load":
                for o in openers.get(c.args[0].a, ()):
                    if o != cmd:
                        g.edges.add((o, cmd, DEVICE_FD))
    return g


def device_paths(cfg: Cfg, effects: dict[int, Effects]) -> dict[int, set[str]]:
    """Device paths each command opens (constant arguments only)."""
    out: dict[int, set[str]] = {}
    for cmd, eff in effects.items():
        for c in eff.calls:
            if c.name == "open" and c.args[0].kind == "addr":
                p = _cstring(cfg.image, c.args[0].a)
                if p is not None:
                    out.setdefault(cmd, set()).add(p)
    return out


# ---------------------------------------------------------------------------
# memory dependencies
# ---------------------------------------------------------------------------

def data_objects(image) -> list[tuple[int, int]]:
    """(address, size) of the main object's sized data symbols."""
    obj = image.objects[0]
    seen = {}
    for s in obj.elf.symbols + obj.elf.dynsyms:
        if s.defined and s.type == STT_OBJECT and s.size > 0:
            seen[obj.bias + s.value] = s.size
    return sorted(seen.items())


def _containing(objects, addr: int) -> tuple[int, int] | None:
    for base, size in objects:
        if base <= addr < base + size:
            return base, size
    return None


def _const(v: AV) -> int | None:
    return v.a if v.kind == "const" else None


def context_object(cfg: Cfg, effects: dict[int, Effects]) -> tuple[int, int] | None:
    objects = data_objects(cfg.image)
    votes: Counter = Counter()
    for eff in effects.values():
        for c in eff.calls:
            if c.name == "mem_move":
                for arg in c.args[:2]:
                    if arg.kind == "addr":
                        o = _containing(objects, arg.a)
                        if o is not None:
                            votes[o] += 1
    if not votes:
        handles = {a for eff in effects.values() for a in _handle_stores(eff).values()}
        for eff in effects.values():
            for addr, _w, *_ in eff.loads + eff.stores:
                o = _containing(objects, addr)
                if o is not None and not any(o[0] <= h < o[0] + o[1] for h in handles):
                    votes[o] += 1
    if not votes:
        return None
    best = max(votes.values())
    return min(o for o, n in votes.items() if n == best)


def analyze_memory_dependencies(cfg: Cfg, ids: CommandIdSet,
                                effects: dict[int, Effects] | None = None) -> DependencyGraph:
    effects = effects if effects is not None else command_effects(cfg, ids)
    g = DependencyGraph(nodes=set(ids.values))
    ctx = context_object(cfg, effects)
    if ctx is None:
        return g
    base, size = ctx
    g.context_object = ctx
    writes: list[tuple[int, int, int]] = []     # (cmd, offset, width)
    reads: list[tuple[int, int, int]] = []

    def inside(addr, n):
        return n and base <= addr and addr + n <= base + size

    for cmd, eff in effects.items():
        for c in eff.calls:
            if c.name != "mem_move":
                continue
            dst, src, n = c.args[0], c.args[1], _const(c.args[2])
            if n is None:
                continue
            if dst.kind == "addr" and inside(dst.a, n):
                writes.append((cmd, dst.a - base, n))
            if src.kind == "addr" and inside(src.a, n):
                reads.append((cmd, src.a - base, n))
        for addr, w, _ in eff.stores:
            if inside(addr, w):
                writes.append((cmd, addr - base, w))
        for addr, w in eff.loads:
            if inside(addr, w):
                reads.append((cmd, addr - base, w))
    ranges = sorted({(o, w) for _, o, w in writes + reads})
    for o, w in ranges:
        f = ContextField(o, w)
        f.writers = {c for c, o2, w2 in writes if o2 < o + w and o < o2 + w2}
        f.readers = {c for c, o2, w2 in reads if o2 < o + w and o < o2 + w2}
        g.context_fields.append(f)
    for wc, wo, ww in writes:
        for rc, ro, rw in reads:
            if wc != rc and wo < ro + rw and ro < wo + ww:
                g.edges.add((wc, rc, CONTEXT_MEMORY))
    return g


def analyze_dependencies(cfg: Cfg, ids: CommandIdSet) -> DependencyGraph:
    """Both dependency kinds over one shared effects pass."""
    effects = command_effects(cfg, ids)
    return analyze_device_dependencies(cfg, ids, effects).merge(
        analyze_memory_dependencies(cfg, ids, effects))


__all__ = ["DEVICE_FD", "CONTEXT_MEMORY", "ContextField", "DependencyGraph", "Effects", "HelperCall",
           "syscall_helpers", "command_effects", "analyze_device_dependencies",
           "analyze_memory_dependencies", "analyze_dependencies", "context_object", "data_objects",
           "device_paths"]
