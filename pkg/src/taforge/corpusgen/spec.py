"""TA generation specs: the data model, the line-oriented text grammar and
validation.

Grammar (``#`` starts a comment)::

    profile OPTEE|TEEGRIS|QSEE|TRUSTY
    width 32|64
    dispatch IF_ELSE_CHAIN|JUMP_TABLE
    inline yes|no                 # switch inside the invoke entry or one call deep
    decoys <n>
    branch_mix <simple fraction>
    seed <int>
    uuid <text>
    field <name> <width> [dangling]
    command <id> <op>; <op>; ...

Ops: ``echo``, ``checksum``, ``device_open <path>``, ``device_read <path>``,
``device_write <path>``, ``device_ioctl <path>``, ``device_close <path>``,
``device_local <path>`` (alias ``device_io``), ``context_write <field>``,
``context_read <field>``, ``require <field>`` and
``vuln <KIND> guard <id>,<id>,...``.
"""

from __future__ import annotations

import dataclasses
import graphlib
from dataclasses import dataclass, field

from ..errors import SpecInvalid
from ..profiles import PROFILES

IF_ELSE_CHAIN, JUMP_TABLE = "IF_ELSE_CHAIN", "JUMP_TABLE"
VULN_KINDS = ("STACK_OVERFLOW", "OOB_WRITE", "OOB_READ", "UAF_STUB")
# engine fault kind each planted bug surfaces as
FAULT_OF = {"STACK_OVERFLOW": "OOB_WRITE", "OOB_WRITE": "OOB_WRITE", "OOB_READ": "OOB_READ",
            "UAF_STUB": "OOB_READ"}

DEVICE_OPS = ("device_open", "device_read", "device_write", "device_ioctl", "device_close",
              "device_local")
FIELD_OPS = ("context_write", "context_read", "require")
PLAIN_OPS = ("echo", "checksum")
ALIASES = {"device_io": "device_local"}

MAX_TABLE_SPAN = 1024
MAX_COMMANDS = 256
VULN_CAPACITY = 64          # bytes; the predicate is payload[0] > capacity

DEFAULT_INLINE = {"OPTEE": False, "TEEGRIS": True, "QSEE": False, "TRUSTY": True}
DEFAULT_WIDTH = {"OPTEE": 64, "TEEGRIS": 64, "QSEE": 32, "TRUSTY": 64}


@dataclass(frozen=True)
class Op:
    kind: str
    arg: str | None = None
    guards: tuple[int, ...] = ()

    def text(self) -> str:
        if self.kind == "vuln":
            return f"vuln {self.arg} guard {','.join(map(str, self.guards))}"
        return self.kind if self.arg is None else f"{self.kind} {self.arg}"


@dataclass(frozen=True)
class Command:
    id: int
    ops: tuple[Op, ...]

    @property
    def vuln(self) -> Op | None:
        for op in self.ops:
            if op.kind == "vuln":
                return op
        return None


@dataclass(frozen=True)
class FieldDecl:
    name: str
    width: int
    dangling: bool = False


@dataclass
class TaSpec:
    profile: str
    commands: list[Command] = field(default_factory=list)
    fields: list[FieldDecl] = field(default_factory=list)
    dispatch: str = IF_ELSE_CHAIN
    decoys: int = 0
    branch_mix: float | None = None
    seed: int = 0
    width: int | None = None
    inline: bool | None = None
    uuid: str = ""

    @property
    def word_width(self) -> int:
        return self.width or DEFAULT_WIDTH[self.profile]

    @property
    def inline_dispatch(self) -> bool:
        return DEFAULT_INLINE[self.profile] if self.inline is None else self.inline

    def command(self, cid: int) -> Command:
        for c in self.commands:
            if c.id == cid:
                return c
        raise KeyError(cid)

    def field_decl(self, name: str) -> FieldDecl | None:
        for f in self.fields:
            if f.name == name:
                return f
        return None


# ---------------------------------------------------------------------------
# text form
# ---------------------------------------------------------------------------

def _int(tok: str, n: int) -> int:
    try:
        return int(tok, 0)
    except ValueError:
        raise SpecInvalid(f"line {n}: not an integer: {tok!r}") from None


def parse_op(text: str, n: int = 0) -> Op:
    parts = text.split()
    if not parts:
        raise SpecInvalid(f"line {n}: empty op")
    kind = ALIASES.get(parts[0], parts[0])
    if kind in PLAIN_OPS:
        if len(parts) != 1:
            raise SpecInvalid(f"line {n}: {kind} takes no argument")
        return Op(kind)
    if kind in DEVICE_OPS or kind in FIELD_OPS:
        if len(parts) != 2:
            raise SpecInvalid(f"line {n}: {kind} takes one argument")
        return Op(kind, parts[1])
    if kind == "vuln":
        if len(parts) != 4 or parts[2] != "guard":
            raise SpecInvalid(f"line {n}: expected 'vuln <KIND> guard <ids>'")
        if parts[1] not in VULN_KINDS:
            raise SpecInvalid(f"line {n}: unknown vulnerability kind {parts[1]}")
        guards = tuple(_int(g, n) for g in parts[3].split(",") if g)
        return Op("vuln", parts[1], guards)
    raise SpecInvalid(f"line {n}: unknown op {parts[0]!r}")


def parse_spec(text: str) -> TaSpec:
    kw: dict = {}
    commands: list[Command] = []
    fields: list[FieldDecl] = []
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, _, rest = line.partition(" ")
        rest = rest.strip()
        if key == "profile":
            kw["profile"] = rest.upper()
        elif key == "width":
            kw["width"] = _int(rest, n)
        elif key == "dispatch":
            kw["dispatch"] = rest.upper()
        elif key == "inline":
            if rest not in ("yes", "no"):
                raise SpecInvalid(f"line {n}: inline takes yes or no")
            kw["inline"] = rest == "yes"
        elif key == "decoys":
            kw["decoys"] = _int(rest, n)
        elif key == "branch_mix":
            try:
                kw["branch_mix"] = float(rest)
            except ValueError:
                raise SpecInvalid(f"line {n}: bad branch_mix {rest!r}") from None
        elif key == "seed":
            kw["seed"] = _int(rest, n)
        elif key == "uuid":
            kw["uuid"] = rest
        elif key == "field":
            parts = rest.split()
            if len(parts) not in (2, 3) or (len(parts) == 3 and parts[2] != "dangling"):
                raise SpecInvalid(f"line {n}: expected 'field <name> <width> [dangling]'")
            fields.append(FieldDecl(parts[0], _int(parts[1], n), len(parts) == 3))
        elif key == "command":
            cid_tok, _, body = rest.partition(" ")
            ops = tuple(parse_op(p.strip(), n) for p in body.split(";") if p.strip())
            commands.append(Command(_int(cid_tok, n), ops))
        else:
            raise SpecInvalid(f"line {n}: unknown key {key!r}")
    if "profile" not in kw:
        raise SpecInvalid("spec has no profile line")
    spec = TaSpec(commands=commands, fields=fields, **kw)
    validate(spec)
    return spec


def format_spec(spec: TaSpec) -> str:
    lines = [f"profile {spec.profile}", f"width {spec.word_width}", f"dispatch {spec.dispatch}",
             f"inline {'yes' if spec.inline_dispatch else 'no'}", f"decoys {spec.decoys}"]
    if spec.branch_mix is not None:
        lines.append(f"branch_mix {spec.branch_mix!r}")
    lines.append(f"seed {spec.seed}")
    if spec.uuid:
        lines.append(f"uuid {spec.uuid}")
    for f in spec.fields:
        lines.append(f"field {f.name} {f.width}" + (" dangling" if f.dangling else ""))
    for c in spec.commands:
        lines.append(f"command {c.id} " + "; ".join(op.text() for op in c.ops))
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# validation and ground-truth dependencies
# ---------------------------------------------------------------------------

def guard_field(vuln_cmd: int, k: int) -> str:
    """Name of the k-th session flag of the guard chain protecting ``vuln_cmd``."""
    return f"guard{vuln_cmd}_{k}"


def field_access(spec: TaSpec) -> dict[str, tuple[set[int], set[int]]]:
    """Field name -> (writer ids, reader ids), including guard-chain flags.

    Each written data field ``f`` also has a one-byte set-flag ``f.flag``
    written alongside it; ``require f`` reads only that flag.
    """
    acc: dict[str, tuple[set[int], set[int]]] = {}

    def get(name):
        return acc.setdefault(name, (set(), set()))
    for f in spec.fields:
        get(f.name)
        get(f.name + ".flag")
    for c in spec.commands:
        for op in c.ops:
            if op.kind == "context_write":
                get(op.arg)[0].add(c.id)
                get(op.arg + ".flag")[0].add(c.id)
            elif op.kind == "context_read":
                get(op.arg)[1].add(c.id)
            elif op.kind == "require":
                get(op.arg + ".flag")[1].add(c.id)
            elif op.kind == "vuln":
                for k, g in enumerate(op.guards):
                    get(guard_field(c.id, k))[0].add(g)
                    if k:
                        get(guard_field(c.id, k - 1))[1].add(g)
                if op.guards:
                    get(guard_field(c.id, len(op.guards) - 1))[1].add(c.id)
    return acc


def planted_edges(spec: TaSpec) -> set[tuple[int, int, str]]:
    edges: set[tuple[int, int, str]] = set()
    for writers, readers in field_access(spec).values():
        for w in writers:
            for r in readers:
                if w != r:
                    edges.add((w, r, "CONTEXT_MEMORY"))
    opens: dict[str, set[int]] = {}
    users: dict[str, set[int]] = {}
    for c in spec.commands:
        for op in c.ops:
            if op.kind == "device_open":
                opens.setdefault(op.arg, set()).add(c.id)
            elif op.kind in ("device_read", "device_write", "device_ioctl"):
                users.setdefault(op.arg, set()).add(c.id)
    for path, os_ in opens.items():
        for o in os_:
            for u in users.get(path, ()):
                if o != u:
                    edges.add((o, u, "DEVICE_FD"))
    return edges


def validate(spec: TaSpec) -> None:
    if spec.profile not in PROFILES:
        raise SpecInvalid(f"unknown profile {spec.profile!r}")
    prof = PROFILES[spec.profile]
    if spec.word_width not in prof.word_widths:
        raise SpecInvalid(f"{spec.profile} does not support {spec.word_width}-bit TAs")
    if spec.dispatch not in (IF_ELSE_CHAIN, JUMP_TABLE):
        raise SpecInvalid(f"unknown dispatch style {spec.dispatch!r}")
    if not spec.commands:
        raise SpecInvalid("spec declares no commands")
    if len(spec.commands) > MAX_COMMANDS:
        raise SpecInvalid(f"more than {MAX_COMMANDS} commands")
    ids = [c.id for c in spec.commands]
    if len(set(ids)) != len(ids):
        raise SpecInvalid("duplicate command ids")
    if any(not 0 <= i < 1 << 32 for i in ids):
        raise SpecInvalid("command ids must be unsigned 32-bit values")
    if spec.dispatch == JUMP_TABLE and max(ids) - min(ids) >= MAX_TABLE_SPAN:
        raise SpecInvalid(f"jump table span {max(ids) - min(ids) + 1} exceeds {MAX_TABLE_SPAN}")
    if spec.decoys < 0:
        raise SpecInvalid("negative decoy count")
    if spec.branch_mix is not None and not 0.0 <= spec.branch_mix <= 1.0:
        raise SpecInvalid("branch_mix must lie in [0, 1]")
    names = [f.name for f in spec.fields]
    if len(set(names)) != len(names):
        raise SpecInvalid("duplicate field names")
    for f in spec.fields:
        if not 1 <= f.width <= 256:
            raise SpecInvalid(f"field {f.name}: width must be 1..256")
        if not f.name.isidentifier():
            raise SpecInvalid(f"field {f.name!r}: not an identifier")
    written = {op.arg for c in spec.commands for op in c.ops if op.kind == "context_write"}
    idset = set(ids)
    for c in spec.commands:
        if not c.ops:
            raise SpecInvalid(f"command {c.id} has an empty body")
        if sum(op.kind == "vuln" for op in c.ops) > 1:
            raise SpecInvalid(f"command {c.id}: at most one vuln per command")
        for op in c.ops:
            if op.kind in FIELD_OPS:
                decl = spec.field_decl(op.arg)
                if decl is None:
                    raise SpecInvalid(f"command {c.id}: undeclared field {op.arg!r}")
                if op.kind != "context_write" and op.arg not in written and not decl.dangling:
                    raise SpecInvalid(f"command {c.id}: field {op.arg!r} is never written "
                                      f"(declare it dangling)")
            elif op.kind in DEVICE_OPS:
                if "://" not in op.arg or len(op.arg) > 200:
                    raise SpecInvalid(f"command {c.id}: bad device path {op.arg!r}")
            elif op.kind == "vuln":
                for g in op.guards:
                    if g not in idset:
                        raise SpecInvalid(f"command {c.id}: guard references undeclared command {g}")
                if len(set(op.guards)) != len(op.guards):
                    raise SpecInvalid(f"command {c.id}: repeated guard command")
                if c.id in op.guards:
                    raise SpecInvalid(f"command {c.id}: a vuln cannot guard itself")
    ts = graphlib.TopologicalSorter({i: set() for i in ids})
    for a, b, _ in planted_edges(spec):
        ts.add(b, a)
    try:
        ts.prepare()
    except graphlib.CycleError as e:
        raise SpecInvalid(f"dependency cycle between commands {e.args[1]}") from None


def plant_vulnerability(spec: TaSpec, kind: str, guards: list[int] | tuple[int, ...],
                        command_id: int | None = None) -> TaSpec:
    """Return a copy of ``spec`` with a new guarded faulting command."""
    if kind not in VULN_KINDS:
        raise SpecInvalid(f"unknown vulnerability kind {kind!r}")
    ids = {c.id for c in spec.commands}
    for g in guards:
        if g not in ids:
            raise SpecInvalid(f"guard references undeclared command {g}")
    if command_id is None:
        command_id = max(ids) + 1 if ids else 1
        if spec.dispatch == JUMP_TABLE and command_id - min(ids) >= MAX_TABLE_SPAN:
            command_id = next(i for i in range(min(ids), min(ids) + MAX_TABLE_SPAN) if i not in ids)
    if command_id in ids:
        raise SpecInvalid(f"command {command_id} already exists")
    new = dataclasses.replace(spec, commands=list(spec.commands) +
                              [Command(command_id, (Op("vuln", kind, tuple(guards)),))],
                              fields=list(spec.fields))
    validate(new)
    return new
