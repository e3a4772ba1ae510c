"""Ready-made specs: the HDCP-shaped TA, the guarded-overflow TA used by
the stateful-fuzzing experiment, and a seeded random spec generator."""

from __future__ import annotations

import random

from ..profiles import PROFILES
from .spec import (IF_ELSE_CHAIN, JUMP_TABLE, Command, FieldDecl, Op, TaSpec, plant_vulnerability,
                   validate)

HDCP_IDS = (202, 222, 230, 231, 251, 252)
CRYPTO_DEV = "dev://crypto"


def hdcp_spec(profile: str = "TEEGRIS", dispatch: str = IF_ELSE_CHAIN, seed: int = 1,
              inline: bool | None = False, decoys: int = 1) -> TaSpec:
    """Key-exchange TA: init_context, open/close the crypto device, decrypt.

    222 refuses to run (bad state) until 202 stored the session key, reads
    the device 230 opened and copies out the key 252 installed.
    """
    spec = TaSpec(
        profile=profile, dispatch=dispatch, seed=seed, inline=inline, decoys=decoys,
        uuid="8aaaf200-2450-11e4-abe2-0002a5d5c51b",
        fields=[FieldDecl("session_key", 16), FieldDecl("ukey", 16)],
        commands=[
            Command(202, (Op("context_write", "session_key"),)),
            Command(230, (Op("device_open", CRYPTO_DEV),)),
            Command(231, (Op("device_close", CRYPTO_DEV),)),
            Command(251, (Op("checksum"),)),
            Command(252, (Op("context_write", "ukey"),)),
            Command(222, (Op("require", "session_key"), Op("device_read", CRYPTO_DEV),
                          Op("context_read", "ukey"))),
        ])
    validate(spec)
    return spec


def guarded_overflow_spec(profile: str = "OPTEE", seed: int = 4, kind: str = "OOB_WRITE",
                          dispatch: str = IF_ELSE_CHAIN) -> TaSpec:
    """Eight benign commands plus a fault only reachable after 0x11, 0x12, 0x13 in order."""
    cmds = [Command(0x10, (Op("echo"),)),
            Command(0x11, (Op("checksum"),)),
            Command(0x12, (Op("echo"),)),
            Command(0x13, (Op("checksum"),)),
            Command(0x14, (Op("context_write", "blob"),)),
            Command(0x15, (Op("context_read", "blob"),)),
            Command(0x16, (Op("device_local", "dev://rng"),)),
            Command(0x17, (Op("echo"),))]
    spec = TaSpec(profile=profile, dispatch=dispatch, seed=seed, decoys=1,
                  fields=[FieldDecl("blob", 8)], commands=cmds)
    return plant_vulnerability(spec, kind, [0x11, 0x12, 0x13], command_id=0x20)


# ---------------------------------------------------------------------------
# random specs
# ---------------------------------------------------------------------------

def _ids(rng: random.Random, n: int, style: str) -> list[int]:
    if style == JUMP_TABLE:
        base = rng.choice([0, 1, rng.randrange(2, 300), rng.randrange(0x1000, 0x10000)])
        span = n + rng.randrange(0, n + 4)
        return sorted(rng.sample(range(base, base + span), n))
    pool = set()
    while len(pool) < n:
        pool.add(rng.choice([rng.randrange(0, 64), rng.randrange(64, 0x1000),
                             rng.randrange(0x1000, 1 << 32)]))
    out = sorted(pool)
    rng.shuffle(out)
    return out


def random_spec(rng: random.Random, profile: str | None = None, style: str | None = None,
                n_commands: int | None = None, vuln: bool | None = None,
                branch_mix: float | None = None) -> TaSpec:
    """A valid spec whose dependencies all point from earlier to later commands."""
    profile = profile or rng.choice(sorted(PROFILES))
    style = style or rng.choice((IF_ELSE_CHAIN, JUMP_TABLE))
    n = n_commands or rng.randrange(4, 11)
    ids = _ids(rng, n, style)
    nfields = rng.randrange(0, 4)
    fields = [FieldDecl(f"f{i}", rng.choice((4, 8, 16, 32))) for i in range(nfields)]
    paths = [f"dev://d{i}" for i in range(rng.randrange(1, 3))]
    bodies: list[list[Op]] = [[] for _ in range(n)]

    # field flows: writers strictly before readers
    for f in fields:
        w = rng.randrange(0, n - 1)
        bodies[w].append(Op("context_write", f.name))
        for r in rng.sample(range(w + 1, n), rng.randrange(0, min(3, n - w - 1) + 1)):
            bodies[r].append(Op(rng.choice(("context_read", "require")), f.name))
    # device flows: opener before users
    for p in paths:
        o = rng.randrange(0, n - 1)
        bodies[o].append(Op("device_open", p))
        for u in rng.sample(range(o + 1, n), rng.randrange(0, min(2, n - o - 1) + 1)):
            bodies[u].append(Op(rng.choice(("device_read", "device_write", "device_ioctl")), p))
        if rng.random() < 0.4:
            bodies[rng.randrange(o, n)].append(Op("device_close", p))
    for b in bodies:
        if not b or rng.random() < 0.3:
            b.insert(rng.randrange(len(b) + 1),
                     rng.choice((Op("echo"), Op("checksum"), Op("device_local", "dev://scratch"))))
    commands = [Command(i, tuple(b)) for i, b in zip(ids, bodies)]
    spec = TaSpec(profile=profile, commands=commands, fields=fields, dispatch=style,
                  decoys=rng.randrange(1, 4), seed=rng.randrange(1 << 31),
                  inline=rng.choice((None, True, False)), branch_mix=branch_mix)
    validate(spec)
    if vuln is None:
        vuln = rng.random() < 0.5
    if vuln:
        k = rng.randrange(0, min(3, n) + 1)
        guards = [ids[i] for i in sorted(rng.sample(range(n), k))]
        kind = rng.choice(("STACK_OVERFLOW", "OOB_WRITE", "OOB_READ", "UAF_STUB"))
        spec = plant_vulnerability(spec, kind, guards)
    return spec


def random_corpus(seed: int, count: int = 20) -> list[TaSpec]:
    """``count`` specs cycling through the profiles and both dispatch styles."""
    rng = random.Random(seed)
    names = sorted(PROFILES)
    styles = (IF_ELSE_CHAIN, JUMP_TABLE)
    return [random_spec(rng, names[i % len(names)], styles[(i // len(names)) % 2])
            for i in range(count)]
