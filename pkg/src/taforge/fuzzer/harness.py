"""A prepared TA session: image loaded and linked, optionally rewritten, the
profile's init entrypoints already run and a snapshot taken.

Requests are marshalled into one DEVICE_SHM region allocated before the
snapshot, so every run sees the same buffer addresses::

    +0x0000 .. +0x4000   four 4 KiB slot buffers
    +0x4000              TEE_Param[4] (two pointer-sized words per slot)
    +0x4100              u32 response size (BUFFERS convention)
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

from ..engine import FAULT, BranchTrace, ExitStatus, MachineState, call, restore, snapshot, state_hash
from ..loader import LoadedImage, load_ta
from ..memory import DEVICE_SHM, PAGE
from ..profiles import OPTEE_INVOKE, PT_MEMREF_INOUT, PT_MEMREF_INPUT, PT_MEMREF_OUTPUT, TzosProfile
from ..rewriter import TrampolineTable, rewrite
from ..syscalls import DeviceModel
from .inputs import MAX_PAYLOAD, SLOTS, FuzzInput, Request

REWRITTEN, DIRECT_TRAP = "rewritten", "direct-trap"
MODES = (REWRITTEN, DIRECT_TRAP)
REQUEST_BUDGET = 200_000
MEMREF = (PT_MEMREF_INPUT, PT_MEMREF_OUTPUT, PT_MEMREF_INOUT)

_PARAMS_OFF = SLOTS * MAX_PAYLOAD
_RSP_SIZE_OFF = _PARAMS_OFF + 0x100


@dataclass
class RunResult:
    statuses: list[ExitStatus] = field(default_factory=list)
    events: list[tuple[int, int, int]] = field(default_factory=list)
    instructions: int = 0

    @property
    def fault(self):
        for s in self.statuses:
            if s.kind == FAULT:
                return s.fault
        return None

    @property
    def trace(self) -> BranchTrace:
        return BranchTrace(self.events)


class Session:
    def __init__(self, ta: bytes | LoadedImage, profile: TzosProfile, libs=None,
                 mode: str = REWRITTEN, devices: DeviceModel | None = None, layout=None,
                 budget: int = REQUEST_BUDGET):
        if mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        self.image = ta if isinstance(ta, LoadedImage) else load_ta(ta, profile, layout, libs)
        self.profile = self.image.profile
        self.mode = mode
        self.budget = budget
        self.table: TrampolineTable | None = rewrite(self.image) if mode == REWRITTEN else None
        self.state = MachineState(self.image, devices=devices if devices is not None else
                                  DeviceModel(strict=False), trampolines=self.table)
        self.P = self.image.pointer_size
        self.invoke_addr = self.image.entrypoints["invoke"]
        self.init_statuses = []
        for role in self.profile.init_roles:
            st, _ = call(self.image.entrypoints[role], [0, 0, 0, 0], self.state, budget)
            self.init_statuses.append((role, st))
        self.shm = self.image.vas.allocate(_RSP_SIZE_OFF + PAGE, "RW", DEVICE_SHM, "fuzz-params")
        self.snap = snapshot(self.state)

    # ---- marshalling ----
    def _marshal(self, req: Request) -> list[int]:
        vas, base, P = self.image.vas, self.shm.base, self.P
        words = []
        for i, (t, blob) in enumerate(zip(req.types, req.payloads)):
            addr = base + i * MAX_PAYLOAD
            if blob:
                vas.write_bytes(addr, blob)
            if t in MEMREF:
                words += [addr, len(blob)]
            else:
                padded = blob[:8].ljust(8, b"\0")
                words += list(struct.unpack("<II", padded))
        for k, w in enumerate(words):
            vas.store(base + _PARAMS_OFF + k * P, P, w)
        conv = self.profile.param_convention
        if conv.style == "GP":
            params = base + _PARAMS_OFF
            if conv.args[0] == "func":
                return [OPTEE_INVOKE, 0, req.command, req.param_types, params]
            return [0, req.command, req.param_types, params]
        vas.store(base + _RSP_SIZE_OFF, 4, len(req.payloads[1]))
        return [req.command, base, len(req.payloads[0]), base + MAX_PAYLOAD, base + _RSP_SIZE_OFF]

    def invoke(self, req: Request) -> tuple[ExitStatus, BranchTrace]:
        return call(self.invoke_addr, self._marshal(req), self.state, self.budget)

    # ---- runs ----
    def reset(self):
        restore(self.state, self.snap)

    def run(self, inp: FuzzInput, reset: bool = True) -> RunResult:
        """Invoke each request in order without resetting in between; stop at a fault."""
        if reset:
            self.reset()
        res = RunResult()
        before = self.state.instret
        for req in inp.sequence:
            st, tr = self.invoke(req)
            res.statuses.append(st)
            res.events += tr.events
            if st.kind == FAULT:
                break
        res.instructions = self.state.instret - before
        return res

    def state_hash(self) -> str:
        return state_hash(self.state)

    def syscall_log(self) -> list[tuple]:
        """(site, number, handler, args, result) since the snapshot."""
        return list(self.state.syscalls[self.snap.syscall_count:])

    def response(self, req: Request) -> bytes:
        """Current contents of slot 1, as the TA left it."""
        return self.image.vas.peek(self.shm.base + MAX_PAYLOAD, len(req.payloads[1]))
