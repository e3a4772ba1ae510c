"""Ground-truth manifest emitted next to every generated TA.

Text form: fixed ``[section]`` headers, one record per line, integers in
hex where they are offsets.  Offsets are relative to the object's load bias
(for the TA itself that is the image base).
"""

from __future__ import annotations

from dataclasses import dataclass, field

from ..errors import SpecInvalid

SECTIONS = ("profile", "entry", "commands", "svc", "dependencies", "vulns", "cfg", "branches",
            "fields", "stubs", "meta")


@dataclass(frozen=True)
class SvcRecord:
    obj: str
    offset: int
    immediate: int
    number: int | None       # None when the number travels in a register
    handler: str | None


@dataclass(frozen=True)
class VulnRecord:
    kind: str
    command: int
    trigger: tuple[int, ...]
    fault_offset: int
    fault_kind: str
    predicate: str = "payload[0] > 64"


@dataclass(frozen=True)
class FieldRecord:
    name: str
    offset: int
    width: int
    writers: frozenset[int]
    readers: frozenset[int]


@dataclass
class Manifest:
    profile: str = ""
    width: int = 64
    uuid: str = ""
    dispatch_style: str = ""
    dispatch_offset: int = 0
    default_offset: int = 0
    context_offset: int = 0
    context_size: int = 0
    entries: dict[str, tuple[str, int]] = field(default_factory=dict)
    commands: dict[int, tuple[int, int]] = field(default_factory=dict)   # id -> (arm, handler)
    decoy_values: set[int] = field(default_factory=set)
    svc_sites: list[SvcRecord] = field(default_factory=list)
    dependencies: set[tuple[int, int, str]] = field(default_factory=set)
    vulns: list[VulnRecord] = field(default_factory=list)
    cfg: dict[str, tuple[int, int]] = field(default_factory=dict)        # function -> (offset, edges)
    branches: dict[int, str] = field(default_factory=dict)
    fields: list[FieldRecord] = field(default_factory=list)
    stubs: dict[str, dict[str, int]] = field(default_factory=dict)
    needed: list[str] = field(default_factory=list)
    meta: dict[str, str] = field(default_factory=dict)

    @property
    def command_ids(self) -> set[int]:
        return set(self.commands)

    @property
    def dispatch_function(self) -> str:
        for name, (off, _) in self.cfg.items():
            if off == self.dispatch_offset:
                return name
        raise KeyError("dispatcher not recorded")

    def branch_fractions(self) -> tuple[float, float]:
        n = len(self.branches)
        if not n:
            return 0.0, 0.0
        s = sum(1 for v in self.branches.values() if v == "SIMPLE")
        return s / n, (n - s) / n

    def ta_svc_sites(self) -> list[SvcRecord]:
        return [s for s in self.svc_sites if s.obj == "ta"]


def _ids(s) -> str:
    return ",".join(str(i) for i in sorted(s)) or "-"


def _parse_ids(tok: str) -> list[int]:
    return [] if tok == "-" else [int(x) for x in tok.split(",")]


def format_manifest(m: Manifest) -> str:
    out = ["[profile]", f"name {m.profile}", f"width {m.width}", f"uuid {m.uuid or '-'}",
           f"dispatch {m.dispatch_style} {m.dispatch_offset:#x}", f"default {m.default_offset:#x}",
           f"context {m.context_offset:#x} {m.context_size}",
           "needed " + (",".join(m.needed) or "-")]
    out.append("[entry]")
    for role, (sym, off) in m.entries.items():
        out.append(f"{role} {sym} {off:#x}")
    out.append("[commands]")
    for cid in sorted(m.commands):
        arm, handler = m.commands[cid]
        out.append(f"command {cid} arm {arm:#x} handler {handler:#x}")
    out.append("decoys " + _ids(m.decoy_values))
    out.append("[svc]")
    for s in m.svc_sites:
        num = "reg" if s.number is None else str(s.number)
        out.append(f"site {s.obj} {s.offset:#x} imm {s.immediate} number {num} handler {s.handler or '-'}")
    out.append("[dependencies]")
    for a, b, k in sorted(m.dependencies):
        out.append(f"edge {a} {b} {k}")
    out.append("[vulns]")
    for v in m.vulns:
        out.append(f"vuln {v.kind} command {v.command} trigger {','.join(map(str, v.trigger)) or '-'} "
                   f"fault {v.fault_offset:#x} {v.fault_kind} predicate {v.predicate.replace(' ', '')}")
    out.append("[cfg]")
    for name, (off, edges) in m.cfg.items():
        out.append(f"function {name} {off:#x} edges {edges}")
    out.append("[branches]")
    s, c = m.branch_fractions()
    out.append(f"summary {len(m.branches)} simple {s:.6f} complex {c:.6f}")
    for off in sorted(m.branches):
        out.append(f"branch {off:#x} {m.branches[off]}")
    out.append("[fields]")
    for f in m.fields:
        out.append(f"field {f.name} {f.offset:#x} {f.width} writers {_ids(f.writers)} readers {_ids(f.readers)}")
    out.append("[stubs]")
    for lib, exports in m.stubs.items():
        for name, off in exports.items():
            out.append(f"export {lib} {name} {off:#x}")
    out.append("[meta]")
    for k, v in m.meta.items():
        out.append(f"{k} {v}")
    return "\n".join(out) + "\n"


def parse_manifest(text: str) -> Manifest:
    m = Manifest()
    section = None
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1]
            if section not in SECTIONS:
                raise SpecInvalid(f"manifest line {n}: unknown section {section}")
            continue
        t = line.split()
        try:
            if section == "profile":
                if t[0] == "name":
                    m.profile = t[1]
                elif t[0] == "width":
                    m.width = int(t[1])
                elif t[0] == "uuid":
                    m.uuid = "" if t[1] == "-" else t[1]
                elif t[0] == "dispatch":
                    m.dispatch_style, m.dispatch_offset = t[1], int(t[2], 16)
                elif t[0] == "default":
                    m.default_offset = int(t[1], 16)
                elif t[0] == "context":
                    m.context_offset, m.context_size = int(t[1], 16), int(t[2])
                elif t[0] == "needed":
                    m.needed = [] if t[1] == "-" else t[1].split(",")
            elif section == "entry":
                m.entries[t[0]] = (t[1], int(t[2], 16))
            elif section == "commands":
                if t[0] == "command":
                    m.commands[int(t[1])] = (int(t[3], 16), int(t[5], 16))
                elif t[0] == "decoys":
                    m.decoy_values = set(_parse_ids(t[1]))
            elif section == "svc":
                m.svc_sites.append(SvcRecord(t[1], int(t[2], 16), int(t[4]),
                                             None if t[6] == "reg" else int(t[6]),
                                             None if t[8] == "-" else t[8]))
            elif section == "dependencies":
                m.dependencies.add((int(t[1]), int(t[2]), t[3]))
            elif section == "vulns":
                m.vulns.append(VulnRecord(t[1], int(t[3]), tuple(_parse_ids(t[5])), int(t[7], 16),
                                          t[8], t[10].replace(">", " > ")))
            elif section == "cfg":
                m.cfg[t[1]] = (int(t[2], 16), int(t[4]))
            elif section == "branches":
                if t[0] == "branch":
                    m.branches[int(t[1], 16)] = t[2]
            elif section == "fields":
                m.fields.append(FieldRecord(t[1], int(t[2], 16), int(t[3]),
                                            frozenset(_parse_ids(t[5])), frozenset(_parse_ids(t[7]))))
            elif section == "stubs":
                m.stubs.setdefault(t[1], {})[t[2]] = int(t[3], 16)
            elif section == "meta":
                m.meta[t[0]] = line[len(t[0]):].strip()
            else:
                raise SpecInvalid(f"manifest line {n}: record outside a section")
        except (IndexError, ValueError):
            raise SpecInvalid(f"manifest line {n}: malformed record {line!r}") from None
    return m
