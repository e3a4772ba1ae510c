"""Deterministic interpreter for rehosted TA code.

Runs translated blocks (see :mod:`taforge.jit`) over the image's address
space, records every taken control transfer, turns bad accesses into fault
statuses and supports cheap snapshot/restore of all mutable state.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from typing import Callable, Iterable

from . import isa
from .errors import SnapshotMismatch, UnknownTrampoline
from .jit import CALL, COND_TABLE, KIND_NAMES, RET, TRAP, UNCOND, COND_TAKEN, Translator
from .loader import LoadedImage
from .memory import HOST_RETURN, ILLEGAL_INSN, PAGE, PAGE_SHIFT, WRITE, MemFault, Region
from .rewriter import SvcSite, TrampolineTable, site_for_trampoline
from .syscalls import DeviceModel, SyscallTable, dispatch, table_for

RETURNED, FAULT, BUDGET_EXHAUSTED = "RETURNED", "FAULT", "BUDGET_EXHAUSTED"
DEFAULT_BUDGET = 1_000_000

__all__ = ["COND_TAKEN", "UNCOND", "CALL", "RET", "TRAP", "KIND_NAMES", "HOST_RETURN",
           "Fault", "ExitStatus", "BranchTrace", "MachineState", "Snapshot", "call", "snapshot",
           "restore", "mem_access", "state_hash", "image_filter"]


@dataclass(frozen=True)
class Fault:
    kind: str
    pc: int
    access_addr: int | None = None


@dataclass(frozen=True)
class ExitStatus:
    kind: str
    return_value: int = 0
    fault: Fault | None = None

    def __post_init__(self):
        if (self.fault is not None) != (self.kind == FAULT):
            raise ValueError("fault present iff kind is FAULT")


@dataclass
class BranchTrace:
    events: list[tuple[int, int, int]] = field(default_factory=list)
    filter: Callable[[int], bool] | None = None

    def __len__(self):
        return len(self.events)

    def edges(self) -> set[tuple[int, int]]:
        return {(s, t) for s, t, _ in self.events}


def image_filter(image: LoadedImage) -> Callable[[int], bool]:
    """Admit addresses inside the image's objects and trampoline region."""
    lo, hi = image.extent

    def keep(addr: int) -> bool:
        return lo <= addr < hi
    return keep


class MachineState:
    """Registers, flags, pc and the run-time services around one image.

    ``R`` holds x0-x30, sp (index 31) and the packed NZCV flags (index 32).
    """

    def __init__(self, image: LoadedImage, table: SyscallTable | None = None,
                 devices: DeviceModel | None = None, trampolines: TrampolineTable | None = None):
        self.image = image
        self.vas = image.vas
        self.profile = image.profile
        self.mask = isa.M64 if image.word_width == 64 else isa.M32
        self.R = [0] * 33
        self.pc = 0
        self.instret = 0
        self.table = table or table_for(image.profile)
        self.devices = devices if devices is not None else DeviceModel(strict=False)
        self.trampolines = trampolines
        self.syscalls: list[tuple] = []
        self.ctx_stack: list[list[int]] = []
        self.ev: list[tuple[int, int, int]] = []
        self._sites: dict[int, SvcSite] = {}
        env = {"R": self.R, "S": self, "T": self.ev.append, "ld": self.vas.load,
               "st": self.vas.store, "MemFault": MemFault}
        for c, row in enumerate(COND_TABLE):
            env[f"CT{c}"] = row
        self.translator = Translator(env, self.mask)
        self.cache: dict = {}
        self.cache1: dict = {}
        self.code_gen = self.vas.code_gen
        self.base_snap: Snapshot | None = None

    # ---- services called from translated code ----
    def trap(self, pc: int, word: int) -> int:
        """Direct-trap handling of an svc at ``pc``."""
        self.ev.append((pc, pc + 4, TRAP))
        site = self._sites.get(pc)
        if site is None:
            site = self._sites[pc] = SvcSite(pc, isa.svc_immediate(word), word)
        try:
            self.R[0] = dispatch(self.table, self, site, self.devices)
        except MemFault as e:
            e.pc = pc
            raise
        return pc + 4

    def gate(self, pc: int, which: int) -> int:
        tr = self.trampolines
        if tr is None or tr.region is None or not tr.region.contains(pc):
            raise MemFault(ILLEGAL_INSN, None)
        if which == isa.GATE_SAVE:
            self.ctx_stack.append(self.R[:])
        elif which == isa.GATE_DISPATCH:
            try:
                site = site_for_trampoline(tr, pc - 4)
            except UnknownTrampoline:
                raise MemFault(ILLEGAL_INSN, None) from None
            ctx = self.ctx_stack[-1]
            try:
                ctx[0] = dispatch(self.table, self, site, self.devices, regs=ctx)
            except MemFault as e:
                e.pc = site.address
                raise
        elif which == isa.GATE_RESTORE:
            if not self.ctx_stack:
                raise MemFault(ILLEGAL_INSN, None)
            self.R[:] = self.ctx_stack.pop()
        else:
            raise MemFault(ILLEGAL_INSN, None)
        return pc + 4

    def block(self, pc: int, single: bool = False):
        cache = self.cache1 if single else self.cache
        blk = cache.get(pc)
        if blk is None:
            blk = self.translator.build(pc, self.vas.fetch, 1 if single else 48)
            cache[pc] = blk
        return blk

    @property
    def sp(self) -> int:
        return self.R[31]

    @property
    def nzcv(self) -> int:
        return self.R[32]


def _fault_index(e: BaseException, blk) -> int:
    tb = e.__traceback__
    while tb is not None:
        if tb.tb_frame.f_code is blk.code:
            return blk.lines.get(tb.tb_lineno, 0)
        tb = tb.tb_next
    return 0


def call(function_addr: int, args: Iterable[int], state: MachineState, budget: int = DEFAULT_BUDGET,
         trace_filter: Callable[[int], bool] | None = None) -> tuple[ExitStatus, BranchTrace]:
    """Run ``function_addr`` until it returns to the host, faults or runs out of budget."""
    if budget <= 0:
        raise ValueError("budget must be positive")
    R = state.R
    mask = state.mask
    args = [a & mask for a in args]
    for i in range(31):
        R[i] = 0
    R[32] = 0
    for i, a in enumerate(args[:8]):
        R[i] = a
    sp = state.image.stack_top
    extra = args[8:]
    if extra:
        sp = (sp - 8 * len(extra)) & ~0xF
        for i, a in enumerate(extra):
            state.vas.store(sp + 8 * i, 8, a)
    R[31] = sp
    R[30] = HOST_RETURN
    state.ctx_stack.clear()
    ev = state.ev
    ev.clear()
    ev.append((HOST_RETURN, function_addr, CALL))
    vas = state.vas
    pc = function_addr
    n = 0
    status = None
    while pc != HOST_RETURN:
        if state.code_gen != vas.code_gen:
            state.cache.clear()
            state.cache1.clear()
            state.code_gen = vas.code_gen
        blk = state.cache.get(pc)
        try:
            if blk is None:
                blk = state.block(pc)
            if n + blk.n > budget:
                if n >= budget:
                    status = ExitStatus(BUDGET_EXHAUSTED, 0)
                    break
                blk = state.block(pc, single=True)
        except MemFault as e:
            status = ExitStatus(FAULT, fault=Fault(e.kind, pc, e.addr))
            break
        try:
            pc = blk.fn()
        except MemFault as e:
            idx = _fault_index(e, blk)
            n += idx
            fpc = getattr(e, "pc", None)
            if fpc is None:
                fpc = blk.pc + 4 * idx
            status = ExitStatus(FAULT, fault=Fault(e.kind, fpc, e.addr))
            pc = fpc
            break
        n += blk.n
    if status is None:
        status = ExitStatus(RETURNED, R[0] & mask)
    state.pc = pc
    state.instret += n
    events = list(ev)
    if trace_filter is not None:
        f = trace_filter
        events = [e for e in events
                  if (e[0] == HOST_RETURN or f(e[0])) and (e[1] == HOST_RETURN or f(e[1]))]
    return status, BranchTrace(events, trace_filter)


# ---------------------------------------------------------------------------
# snapshots
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class Snapshot:
    vas_uid: int
    regs: tuple[int, ...]
    pc: int
    instret: int
    regions: tuple[Region, ...]
    mem: dict
    devices: tuple
    syscall_count: int

    def key(self) -> tuple:
        mem = tuple((r.base, r.length, r.perms, hashlib.sha1(self.mem[r]).hexdigest() if r in self.mem else "")
                    for r in self.regions)
        dev = self.devices[:4] + (self.devices[4].hexdigest(),)
        return (self.vas_uid, self.regs, self.pc, mem, dev)

    def __eq__(self, other):
        return isinstance(other, Snapshot) and self.key() == other.key()

    __hash__ = None


def snapshot(state: MachineState) -> Snapshot:
    vas = state.vas
    regions = tuple(vas.regions)
    mem = {r: bytes(r.data) for r in regions if r.w}
    snap = Snapshot(vas.uid, tuple(state.R), state.pc, state.instret, regions, mem,
                    state.devices.state(), len(state.syscalls))
    state.base_snap = snap
    vas.dirty.clear()
    return snap


def restore(state: MachineState, snap: Snapshot) -> None:
    vas = state.vas
    if snap.vas_uid != vas.uid:
        raise SnapshotMismatch("snapshot was taken from a different address space")
    same_layout = len(vas.regions) == len(snap.regions) and all(
        a is b for a, b in zip(vas.regions, snap.regions))
    if state.base_snap is snap and same_layout:
        pages = vas.pages
        for p in vas.dirty:
            reg = pages.get(p)
            if reg is not None and reg.w:
                o = (p << PAGE_SHIFT) - reg.base
                reg.data[o:o + PAGE] = snap.mem[reg][o:o + PAGE]
    else:
        old_x = [r for r in vas.regions if r.x]
        vas.regions = list(snap.regions)
        pages = {}
        for reg in vas.regions:
            for p in range(reg.base >> PAGE_SHIFT, reg.end >> PAGE_SHIFT):
                pages[p] = reg
            if reg.w:
                reg.data[:] = snap.mem[reg]
        vas.pages = pages
        if old_x != [r for r in vas.regions if r.x]:
            vas.code_gen += 1
    vas.dirty.clear()
    state.base_snap = snap
    state.R[:] = snap.regs
    state.pc = snap.pc
    state.instret = snap.instret
    state.devices.set_state(snap.devices)
    del state.syscalls[snap.syscall_count:]
    state.ctx_stack.clear()


def state_hash(state: MachineState, include_pc: bool = True) -> str:
    """Registers, flags, pc, writable memory and device state; excludes instret."""
    h = hashlib.sha256()
    h.update(struct.pack("<33Q", *[r & isa.M64 for r in state.R]))
    if include_pc:
        h.update(struct.pack("<Q", state.pc))
    h.update(state.vas.contents_hash(writable_only=True).encode())
    h.update(state.devices.digest().encode())
    return h.hexdigest()


def mem_access(state: MachineState, addr: int, width: int, kind: str, value: int = 0):
    """Checked access returning the loaded word (or ``value`` for writes), or a Fault."""
    try:
        if kind == WRITE:
            state.vas.access(addr, width, WRITE)
            state.vas.store(addr, width, value)
            return value
        return state.vas.access(addr, width, kind)
    except MemFault as e:
        return Fault(e.kind, state.pc, addr)


# ---------------------------------------------------------------------------
# trace files
# ---------------------------------------------------------------------------

_REC = struct.Struct("<QQB")


def format_trace(events: Iterable[tuple[int, int, int]]) -> str:
    return "".join(f"{s:#x} {t:#x} {KIND_NAMES[k]}\n" for s, t, k in events)


def parse_trace(text: str) -> list[tuple[int, int, int]]:
    out = []
    for n, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 3 or parts[2] not in KIND_NAMES:
            raise ValueError(f"trace line {n}: expected 'source target kind'")
        out.append((int(parts[0], 0), int(parts[1], 0), KIND_NAMES.index(parts[2])))
    return out


def encode_trace(events: Iterable[tuple[int, int, int]]) -> bytes:
    return b"".join(_REC.pack(s, t, k) for s, t, k in events)


def decode_trace(blob: bytes) -> list[tuple[int, int, int]]:
    if len(blob) % _REC.size:
        raise ValueError("binary trace length is not a multiple of 17")
    return [_REC.unpack_from(blob, o) for o in range(0, len(blob), _REC.size)]


def write_trace(path, events, binary: bool = False) -> None:
    if binary:
        with open(path, "wb") as f:
            f.write(encode_trace(events))
    else:
        with open(path, "w") as f:
            f.write(format_trace(events))


def read_trace(path, binary: bool | None = None) -> list[tuple[int, int, int]]:
    with open(path, "rb") as f:
        blob = f.read()
    if binary is None:
        try:
            return parse_trace(blob.decode("ascii"))
        except (UnicodeDecodeError, ValueError):
            return decode_trace(blob)
    return decode_trace(blob) if binary else parse_trace(blob.decode("ascii"))
