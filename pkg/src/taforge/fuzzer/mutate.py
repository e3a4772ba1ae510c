"""Single-operator input mutation.

Operators work either on one request's payload slot or on the command
sequence.  Command-id substitution draws from the recovered id set and, one
time in sixteen, from outside it so the default arm stays exercised.
"""

from __future__ import annotations

import random
import struct

from .inputs import MAX_PAYLOAD, FuzzInput, Request

OUT_OF_SET_ODDS = 16
MAX_SEQUENCE = 16

INTERESTING = {
    1: (0, 1, 0x7F, 0x80, 0xFF),
    2: (0, 1, 0x7FFF, 0x8000, 0xFFFF),
    4: (0, 1, 0x7FFFFFFF, 0x80000000, 0xFFFFFFFF),
    8: (0, 1, (1 << 63) - 1, 1 << 63, (1 << 64) - 1),
}
_PACK = {1: "<B", 2: "<H", 4: "<I", 8: "<Q"}

PAYLOAD_OPS = ("bit_flip", "byte_flip", "interesting", "grow", "shrink", "duplicate")
SEQUENCE_OPS = ("substitute", "truncate", "extend")


class Mutator:
    def __init__(self, ids, max_payload: int = MAX_PAYLOAD, allow_sequences: bool = True):
        self.ids = sorted(set(ids))
        self.max_payload = max_payload
        self.allow_sequences = allow_sequences
        self.last_op = None

    # ---- command ids ----
    def draw_command(self, rng: random.Random) -> int:
        if not self.ids or rng.randrange(OUT_OF_SET_ODDS) == 0:
            known = set(self.ids)
            while True:
                v = rng.getrandbits(32)
                if v not in known:
                    return v
        return rng.choice(self.ids)

    # ---- payload operators ----
    def _payload_op(self, op: str, blob: bytes, rng) -> bytes:
        b = bytearray(blob)
        if op == "bit_flip":
            i = rng.randrange(len(b) * 8)
            b[i // 8] ^= 1 << (i % 8)
        elif op == "byte_flip":
            b[rng.randrange(len(b))] ^= rng.randrange(1, 256)
        elif op == "interesting":
            w = rng.choice([w for w in (1, 2, 4, 8) if w <= len(b)])
            pos = rng.randrange(len(b) - w + 1)
            b[pos:pos + w] = struct.pack(_PACK[w], rng.choice(INTERESTING[w]))
        elif op == "grow":
            n = rng.randint(1, min(64, self.max_payload - len(b)))
            pos = rng.randint(0, len(b))
            b[pos:pos] = rng.randbytes(n)
        elif op == "shrink":
            n = rng.randint(1, min(len(b), 64))
            pos = rng.randint(0, len(b) - n)
            del b[pos:pos + n]
        elif op == "duplicate":
            n = rng.randint(1, min(len(b), 32, self.max_payload - len(b)))
            src = rng.randint(0, len(b) - n)
            dst = rng.randint(0, len(b))
            b[dst:dst] = b[src:src + n]
        return bytes(b)

    def _applicable(self, inp: FuzzInput) -> list[str]:
        any_bytes = any(p for r in inp.sequence for p in r.payloads)
        room = any(len(p) < self.max_payload for r in inp.sequence for p in r.payloads)
        ops = []
        if any_bytes:
            ops += ["bit_flip", "byte_flip", "interesting", "shrink"]
            if room:
                ops.append("duplicate")
        if room:
            ops.append("grow")
        ops.append("substitute")
        if self.allow_sequences:
            if len(inp.sequence) > 1:
                ops.append("truncate")
            if len(inp.sequence) < MAX_SEQUENCE:
                ops.append("extend")
        return ops

    def apply(self, op: str, inp: FuzzInput, rng: random.Random) -> FuzzInput:
        seq = list(inp.sequence)
        if op in PAYLOAD_OPS:
            cands = [k for k, r in enumerate(seq) if self._slot_ok(r, op)]
            k = rng.choice(cands)
            req = seq[k]
            slot = self._slot_for(req, op, rng)
            seq[k] = req.with_payload(slot, self._payload_op(op, req.payloads[slot], rng))
        elif op == "substitute":
            k = rng.randrange(len(seq))
            r = seq[k]
            seq[k] = Request(self.draw_command(rng), r.types, r.payloads)
        elif op == "truncate":
            # drop one command from either end
            seq = seq[1:] if rng.random() < 0.5 else seq[:-1]
        elif op == "extend":
            donor = rng.choice(seq)
            new = Request(self.draw_command(rng), donor.types, donor.payloads)
            seq.insert(rng.randint(0, len(seq)), new)
        else:
            raise ValueError(f"unknown mutation operator {op!r}")
        return FuzzInput(tuple(seq), inp.seed_id)

    def _slot_ok(self, req: Request, op: str) -> bool:
        if op == "grow":
            return any(len(p) < self.max_payload for p in req.payloads)
        if op == "duplicate":
            return any(p and len(p) < self.max_payload for p in req.payloads)
        return any(req.payloads)

    def _slot_for(self, req: Request, op: str, rng) -> int:
        if op == "grow":
            slots = [i for i, p in enumerate(req.payloads) if len(p) < self.max_payload]
        elif op == "duplicate":
            slots = [i for i, p in enumerate(req.payloads) if p and len(p) < self.max_payload]
        else:
            slots = [i for i, p in enumerate(req.payloads) if p]
        # the request buffer is what handlers parse; favour it
        return 0 if 0 in slots and rng.random() < 0.5 else rng.choice(slots)

    def mutate(self, inp: FuzzInput, rng: random.Random) -> FuzzInput:
        """Apply exactly one operator; operators that happen to leave the input
        unchanged (a flip undone by an equal splice, say) are redrawn."""
        ops = self._applicable(inp)
        out = inp
        for _ in range(8):
            op = rng.choice(ops)
            out = self.apply(op, inp, rng)
            self.last_op = op
            if out != inp:
                break
        return out


def mutate(inp: FuzzInput, rng: random.Random, ids=(), max_payload: int = MAX_PAYLOAD) -> FuzzInput:
    return Mutator(ids, max_payload).mutate(inp, rng)


__all__ = ["Mutator", "mutate", "INTERESTING", "PAYLOAD_OPS", "SEQUENCE_OPS", "OUT_OF_SET_ODDS"]
