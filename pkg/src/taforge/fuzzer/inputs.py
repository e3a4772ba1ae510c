"""Fuzz inputs: command sequences with four GP-style parameter slots each,
and their length-prefixed binary form.

Binary layout (little endian)::

    u32 sequence length
    per request:
        u64 command id
        u8[4] slot types
        per slot: u32 size, <size> bytes
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field

from ..errors import TaforgeError
from ..profiles import DEFAULT_PARAM_TYPES

MAX_PAYLOAD = 4096
SLOTS = 4


class InputFormatError(TaforgeError):
    code = "INPUT_FORMAT"


def unpack_types(param_types: int) -> tuple[int, int, int, int]:
    return tuple((param_types >> (4 * i)) & 0xF for i in range(SLOTS))


def pack_types(types) -> int:
    return sum((t & 0xF) << (4 * i) for i, t in enumerate(types))


@dataclass(frozen=True)
class Request:
    command: int
    types: tuple[int, int, int, int] = unpack_types(DEFAULT_PARAM_TYPES)
    payloads: tuple[bytes, bytes, bytes, bytes] = (b"", b"", b"", b"")

    @property
    def param_types(self) -> int:
        return pack_types(self.types)

    @property
    def sizes(self) -> tuple[int, ...]:
        return tuple(len(p) for p in self.payloads)

    def with_payload(self, slot: int, blob: bytes) -> "Request":
        p = list(self.payloads)
        p[slot] = blob
        return Request(self.command, self.types, tuple(p))


def request(command: int, data: bytes = b"", out_size: int = 64,
            param_types: int = DEFAULT_PARAM_TYPES) -> Request:
    """Input buffer in slot 0, a zeroed in/out buffer of ``out_size`` in slot 1."""
    return Request(command, unpack_types(param_types), (bytes(data), bytes(out_size), b"", b""))


@dataclass(frozen=True)
class FuzzInput:
    sequence: tuple[Request, ...]
    seed_id: str = field(default="", compare=False)

    def __post_init__(self):
        if not self.sequence:
            raise InputFormatError("empty command sequence")
        for r in self.sequence:
            if any(len(p) > MAX_PAYLOAD for p in r.payloads):
                raise InputFormatError(f"payload larger than {MAX_PAYLOAD} bytes")

    @property
    def commands(self) -> tuple[int, ...]:
        return tuple(r.command for r in self.sequence)

    def digest(self) -> str:
        return hashlib.sha1(encode_input(self)).hexdigest()[:16]


def encode_input(inp: FuzzInput) -> bytes:
    out = bytearray(struct.pack("<I", len(inp.sequence)))
    for r in inp.sequence:
        out += struct.pack("<Q4B", r.command & (1 << 64) - 1, *r.types)
        for p in r.payloads:
            out += struct.pack("<I", len(p)) + p
    return bytes(out)


def decode_input(blob: bytes, seed_id: str = "") -> tuple[FuzzInput, bytes]:
    """Parse one input; returns it and any trailing bytes."""
    try:
        (n,), pos = struct.unpack_from("<I", blob, 0), 4
        seq = []
        for _ in range(n):
            cmd, *types = struct.unpack_from("<Q4B", blob, pos)
            pos += 12
            payloads = []
            for _ in range(SLOTS):
                (size,) = struct.unpack_from("<I", blob, pos)
                pos += 4
                if size > MAX_PAYLOAD or pos + size > len(blob):
                    raise InputFormatError(f"slot size {size} at offset {pos - 4} is out of range")
                payloads.append(bytes(blob[pos:pos + size]))
                pos += size
            seq.append(Request(cmd, tuple(types), tuple(payloads)))
    except struct.error:
        raise InputFormatError("truncated input record") from None
    return FuzzInput(tuple(seq), seed_id), bytes(blob[pos:])
