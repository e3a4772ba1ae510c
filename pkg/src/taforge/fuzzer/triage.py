"""Crash reports: dedup keys, on-disk form and replay.

The dedup key hashes the fault kind, the fault pc and the last four
normalized trace edges, all as offsets from the image base so keys survive
a different load address.  A crash file is the encoded input followed by a
one-line fault record::

    fault <kind> pc <offset> access <address|-> key <dedup_key>
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

from ..engine import Fault
from .inputs import FuzzInput, InputFormatError, decode_input, encode_input

TRACE_TAIL = 64
KEY_EDGES = 4


def dedup_key(kind: str, pc_offset: int, edges) -> str:
    tail = list(edges)[-KEY_EDGES:]
    text = f"{kind}|{pc_offset:#x}|" + ";".join(f"{s:#x}>{t:#x}" for s, t in tail)
    return hashlib.sha1(text.encode()).hexdigest()[:16]


@dataclass
class CrashReport:
    input: FuzzInput
    fault: Fault
    dedup_key: str
    pc_offset: int
    trace_tail: list[tuple[int, int]] = field(default_factory=list)
    command: int | None = None          # the command that faulted

    def fault_line(self) -> str:
        acc = "-" if self.fault.access_addr is None else f"{self.fault.access_addr:#x}"
        return (f"fault {self.fault.kind} pc {self.pc_offset:#x} access {acc} "
                f"key {self.dedup_key}")

    def to_bytes(self) -> bytes:
        return encode_input(self.input) + (self.fault_line() + "\n").encode()


def build_report(inp: FuzzInput, fault: Fault, normalized_edges, image_base: int,
                 command: int | None = None, tail: int = TRACE_TAIL) -> CrashReport:
    off = fault.pc - image_base
    edges = list(normalized_edges)
    return CrashReport(inp, fault, dedup_key(fault.kind, off, edges), off, edges[-tail:], command)


@dataclass(frozen=True)
class StoredCrash:
    input: FuzzInput
    kind: str
    pc_offset: int
    access: int | None
    dedup_key: str


def parse_crash(blob: bytes, seed_id: str = "") -> StoredCrash:
    inp, rest = decode_input(blob, seed_id)
    try:
        t = rest.decode().split()
        if t[0] != "fault" or t[2] != "pc" or t[4] != "access" or t[6] != "key":
            raise ValueError
        acc = None if t[5] == "-" else int(t[5], 16)
        return StoredCrash(inp, t[1], int(t[3], 16), acc, t[7])
    except (ValueError, IndexError, UnicodeDecodeError):
        raise InputFormatError("crash file lacks a valid fault record") from None


def replay(session, inp: FuzzInput, normalizer) -> CrashReport | None:
    """Re-run ``inp`` from the session snapshot; a report if it faults."""
    res = session.run(inp)
    fault = res.fault
    if fault is None:
        return None
    cmd = inp.sequence[len(res.statuses) - 1].command
    return build_report(inp, fault, normalizer(res.events), session.image.image_base, cmd)


__all__ = ["CrashReport", "StoredCrash", "dedup_key", "build_report", "parse_crash", "replay",
           "TRACE_TAIL"]
