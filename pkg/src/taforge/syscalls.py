"""Per-TZOS syscall tables, the scripted device model and the handlers
backing the emulated secure-world kernel services."""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field

from .errors import ConfigError, WindowExhausted
from .memory import DEVICE_SHM, HEAP, page_ceil
from .profiles import PROFILES, TzosProfile

log = logging.getLogger(__name__)

HANDLERS = ("open", "read", "write", "close", "ioctl", "mmap", "mem_move", "alloc", "free",
            "get_random", "unsupported")

REGISTER, IMMEDIATE = "REGISTER", "IMMEDIATE"

PROT_READ, PROT_WRITE, PROT_EXEC = 1, 2, 4

FIRST_FD = 3
PHYS_PREFIX = "phys://"
PHYS_SIZE = 0x1000

# handler argument names, in argument-register order
ARGS = {
    "open": ("path", "flags"),
    "read": ("fd", "buf", "len"),
    "write": ("fd", "buf", "len"),
    "close": ("fd",),
    "ioctl": ("fd", "req", "buf", "len"),
    "mmap": ("len", "prot"),
    "mem_move": ("dst", "src", "len"),
    "alloc": ("len",),
    "free": ("ptr",),
    "get_random": ("buf", "len"),
    "unsupported": (),
}


@dataclass(frozen=True)
class SyscallTable:
    profile: str
    entries: dict[int, str]
    number_source: str = IMMEDIATE
    number_register: int | None = None
    arg_registers: tuple[int, ...] = (0, 1, 2, 3, 4, 5)
    return_register: int = 0

    def __post_init__(self):
        if not self.entries:
            raise ConfigError(f"syscall table {self.profile} is empty")
        for h in self.entries.values():
            if h not in HANDLERS:
                raise ConfigError(f"unknown handler {h!r}")
        if (self.number_source == REGISTER) != (self.number_register is not None):
            raise ConfigError("number_register required iff number_source is REGISTER")

    def number_of(self, handler: str) -> int:
        for n, h in self.entries.items():
            if h == handler:
                return n
        raise KeyError(handler)

    def handler_for(self, number: int) -> str:
        return self.entries.get(number, "unsupported")


_ORDER = ("open", "read", "write", "close", "ioctl", "mmap", "mem_move", "alloc", "free", "get_random")
_TRUSTY_ORDER = ("open", "write", "close", "read", "ioctl", "mmap", "mem_move", "alloc", "free", "get_random")

TABLES = {
    "OPTEE": SyscallTable("OPTEE", {2 + i: h for i, h in enumerate(_ORDER)}),
    "TEEGRIS": SyscallTable("TEEGRIS", {0x21 + i: h for i, h in enumerate(_ORDER)}),
    "TRUSTY": SyscallTable("TRUSTY", {1 + i: h for i, h in enumerate(_TRUSTY_ORDER)}),
    # generic svc #0 inside the common library; the number travels in x7
    "QSEE": SyscallTable("QSEE", {0x102 + i: h for i, h in enumerate(_ORDER)},
                         number_source=REGISTER, number_register=7),
}


def table_for(profile: TzosProfile | str) -> SyscallTable:
    key = profile if isinstance(profile, str) else profile.syscall_table_id
    if key not in TABLES:
        raise ConfigError(f"no syscall table {key!r}")
    return TABLES[key]


# ---------------------------------------------------------------------------
# devices
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ScriptEntry:
    response: bytes
    status: int = 0
    pattern: bytes | None = None


@dataclass
class Device:
    path: str
    script: list[ScriptEntry] = field(default_factory=list)
    pos: int = 0
    open_count: int = 0
    shm_base: int | None = None


class DeviceModel:
    """Scripted devices plus the per-session fd table.

    With ``strict`` unset, any ``dev://`` path opens (with an empty script);
    otherwise only configured paths and ``phys://`` do.
    """

    def __init__(self, scripts: dict[str, list[ScriptEntry]] | None = None, strict: bool = True,
                 seed: int = 0):
        self.scripts = {p: list(s) for p, s in (scripts or {}).items()}
        self.strict = strict
        self.seed = seed
        self.reset()

    def reset(self):
        self.devices: dict[str, Device] = {p: Device(p, s) for p, s in self.scripts.items()}
        self.fds: dict[int, list] = {}     # fd -> [path, cursor]
        self.next_fd = FIRST_FD
        self.rng_counter = 0
        self.writes = hashlib.sha1()

    def known(self, path: str) -> bool:
        if path in self.devices or path.startswith(PHYS_PREFIX):
            return True
        return not self.strict and path.startswith("dev://")

    # state vector for snapshots
    def state(self) -> tuple:
        devs = tuple((p, d.pos, d.open_count, d.shm_base) for p, d in sorted(self.devices.items()))
        fds = tuple((fd, v[0], v[1]) for fd, v in sorted(self.fds.items()))
        return (self.next_fd, fds, devs, self.rng_counter, self.writes.copy())

    def set_state(self, st: tuple):
        self.next_fd, fds, devs, self.rng_counter, writes = st
        self.fds = {fd: [p, c] for fd, p, c in fds}
        for p, pos, oc, shm in devs:
            d = self.devices.get(p)
            if d is None:
                d = self.devices[p] = Device(p, self.scripts.get(p, []))
            d.pos, d.open_count, d.shm_base = pos, oc, shm
        for p in [p for p in self.devices if p not in {x[0] for x in devs}]:
            del self.devices[p]
        self.writes = writes.copy()

    def digest(self) -> str:
        h = hashlib.sha1(repr(self.state()[:4]).encode())
        h.update(self.writes.digest())
        return h.hexdigest()

    def next_response(self, path: str, request: bytes | None = None) -> ScriptEntry | None:
        d = self.devices[path]
        if d.pos >= len(d.script):
            return None
        e = d.script[d.pos]
        if e.pattern is not None and request is not None and not request.startswith(e.pattern):
            return ScriptEntry(b"", -1)
        d.pos += 1
        return e

    def random_bytes(self, n: int) -> bytes:
        out = bytearray()
        while len(out) < n:
            out += hashlib.sha256(f"{self.seed}:{self.rng_counter}".encode()).digest()
            self.rng_counter += 1
        return bytes(out[:n])


def open_device(devices: DeviceModel, path: str, error_code: int = PROFILES["OPTEE"].error_code) -> int:
    """Fresh fd for a known path, the error code otherwise (no fd consumed)."""
    if not devices.known(path):
        return error_code
    d = devices.devices.get(path)
    if d is None:
        d = devices.devices[path] = Device(path, devices.scripts.get(path, []))
    d.open_count += 1
    fd = devices.next_fd
    devices.next_fd += 1
    devices.fds[fd] = [path, 0]
    return fd


def parse_device_script(text: str) -> dict[str, list[ScriptEntry]]:
    """``device <path>`` lines followed by ``respond <hex|-> status <int> [match <hex>]``."""
    scripts: dict[str, list[ScriptEntry]] = {}
    cur = None
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        try:
            if parts[0] == "device" and len(parts) == 2:
                cur = parts[1]
                scripts.setdefault(cur, [])
            elif parts[0] == "respond":
                if cur is None:
                    raise ValueError("respond before any device")
                hexdata = "" if parts[1] == "-" else parts[1]
                rest = parts[2:]
                opts = dict(zip(rest[::2], rest[1::2]))
                if set(opts) - {"status", "match"}:
                    raise ValueError(f"unknown keys {sorted(set(opts) - {'status', 'match'})}")
                pattern = bytes.fromhex(opts["match"]) if "match" in opts else None
                scripts[cur].append(ScriptEntry(bytes.fromhex(hexdata), int(opts.get("status", "0"), 0),
                                                pattern))
            else:
                raise ValueError(f"unknown directive {parts[0]!r}")
        except (ValueError, IndexError) as e:
            raise ConfigError(f"device script line {n}: {e}") from None
    return scripts


def format_device_script(scripts: dict[str, list[ScriptEntry]]) -> str:
    lines = []
    for path, entries in scripts.items():
        lines.append(f"device {path}")
        for e in entries:
            s = f"respond {e.response.hex() or '-'} status {e.status}"
            if e.pattern is not None:
                s += f" match {e.pattern.hex()}"
            lines.append(s)
    return "\n".join(lines) + "\n"


def load_device_script(path) -> DeviceModel:
    with open(path) as f:
        return DeviceModel(parse_device_script(f.read()))


# ---------------------------------------------------------------------------
# handlers
# ---------------------------------------------------------------------------

def mmap_region(state, length: int, prot: int, kind: str = HEAP) -> int:
    """Map a fresh page-aligned region; returns its base or the error code."""
    err = state.profile.error_code
    if length <= 0 or length > state.vas.window[1] - state.vas.window[0]:
        return err
    perms = ("R" if prot & PROT_READ else "") + ("W" if prot & PROT_WRITE else "") + \
        ("X" if prot & PROT_EXEC else "")
    try:
        reg = state.vas.allocate(page_ceil(length), perms or "R", kind, kind.lower())
    except WindowExhausted:
        return err
    return reg.base


def _copy_out(state, addr: int, blob: bytes):
    state.vas.write_bytes(addr & state.mask, blob)


def _copy_in(state, addr: int, n: int) -> bytes:
    return state.vas.read_bytes(addr & state.mask, n)


class Handlers:
    """Handler implementations; each takes (state, devices, args) and returns a word."""

    @staticmethod
    def open(state, dev: DeviceModel, a):
        path = state.vas.read_cstr(a[0] & state.mask).decode("latin-1")
        fd = open_device(dev, path, state.profile.error_code)
        if fd != state.profile.error_code and path.startswith(PHYS_PREFIX):
            d = dev.devices[path]
            if d.shm_base is None:
                base = mmap_region(state, PHYS_SIZE, PROT_READ | PROT_WRITE, DEVICE_SHM)
                if base == state.profile.error_code:
                    return base
                d.shm_base = base
        return fd

    @staticmethod
    def read(state, dev, a):
        fd, buf, n = a[0], a[1], a[2]
        err = state.profile.error_code
        if fd not in dev.fds:
            return err
        path, cur = dev.fds[fd]
        d = dev.devices[path]
        if d.shm_base is not None:
            n = max(0, min(n, PHYS_SIZE - cur))
            blob = state.vas.peek(d.shm_base + cur, n) if n else b""
            _copy_out(state, buf, blob)
            dev.fds[fd][1] = cur + n
            return n
        e = dev.next_response(path)
        if e is None:
            return 0
        if e.status != 0:
            return e.status & state.mask
        blob = e.response[:n]
        _copy_out(state, buf, blob)
        return len(blob)

    @staticmethod
    def write(state, dev, a):
        fd, buf, n = a[0], a[1], a[2]
        err = state.profile.error_code
        if n > 1 << 20:
            return err
        blob = _copy_in(state, buf, n)
        if fd not in dev.fds:
            return err
        path, cur = dev.fds[fd]
        d = dev.devices[path]
        if d.shm_base is not None:
            n = max(0, min(n, PHYS_SIZE - cur))
            state.vas.write_bytes(d.shm_base + cur, blob[:n])
            dev.fds[fd][1] = cur + n
            return n
        dev.writes.update(path.encode() + b"\0" + blob)
        return n

    @staticmethod
    def close(state, dev, a):
        if a[0] not in dev.fds:
            return state.profile.error_code
        del dev.fds[a[0]]
        return 0

    @staticmethod
    def ioctl(state, dev, a):
        fd, req, buf, n = a[0], a[1], a[2], a[3]
        err = state.profile.error_code
        if fd not in dev.fds:
            return err
        path = dev.fds[fd][0]
        d = dev.devices[path]
        if d.shm_base is not None:
            return d.shm_base
        request = _copy_in(state, buf, min(n, 1 << 16)) if n else b""
        dev.writes.update(path.encode() + req.to_bytes(8, "little") + request)
        e = dev.next_response(path, request)
        if e is None:
            return 0
        if e.status != 0:
            return e.status & state.mask
        blob = e.response[:n]
        _copy_out(state, buf, blob)
        return len(blob)

    @staticmethod
    def mmap(state, dev, a):
        return mmap_region(state, a[0], a[1])

    @staticmethod
    def mem_move(state, dev, a):
        dst, src, n = a[0], a[1], a[2]
        if n > 1 << 20:
            return state.profile.error_code
        blob = _copy_in(state, src, n)
        _copy_out(state, dst, blob)
        return 0

    @staticmethod
    def alloc(state, dev, a):
        base = mmap_region(state, a[0], PROT_READ | PROT_WRITE)
        return 0 if base == state.profile.error_code else base

    @staticmethod
    def free(state, dev, a):
        reg = state.vas.region_at(a[0] & state.mask)
        if reg is None or reg.kind != HEAP or reg.base != a[0]:
            return state.profile.error_code
        state.vas.unmap(reg)
        return 0

    @staticmethod
    def get_random(state, dev, a):
        buf, n = a[0], a[1]
        if n > 1 << 16:
            return state.profile.error_code
        _copy_out(state, buf, dev.random_bytes(n))
        return 0

    @staticmethod
    def unsupported(state, dev, a):
        return state.profile.error_code


def syscall_number(table: SyscallTable, regs, site) -> int:
    if table.number_source == IMMEDIATE:
        return site.immediate
    return regs[table.number_register]


def dispatch(table: SyscallTable, state, site, devices: DeviceModel, regs=None) -> int:
    """Run the handler for ``site`` and return the value for the return register.

    ``regs`` defaults to the live register file; trampolines pass the saved
    context instead.  Memory faults raised by a handler propagate to the run.
    """
    regs = state.R if regs is None else regs
    number = syscall_number(table, regs, site)
    name = table.handler_for(number)
    argc = len(ARGS[name])
    args = tuple(regs[r] & state.mask for r in table.arg_registers[:argc])
    if name == "unsupported":
        log.info("unsupported syscall %#x at %#x", number, site.address)
    ret = getattr(Handlers, name)(state, devices, args) & state.mask
    state.syscalls.append((site.address, number, name, args, ret))
    return ret
