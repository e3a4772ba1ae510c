"""Command-sequence scheduling from the state model.

A draw picks a target command (weighted toward commands whose code is still
poorly covered), lays out one legal ordering of its prerequisite chain in
front of it, and fills payloads from a corpus parent ending in the same
command or from scratch.  With probability ``epsilon`` the chain is broken
on purpose (a prerequisite dropped or moved after the target) so the
handlers' bad-state arms get exercised too.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field

from ..analysis.state_model import StateModel
from ..profiles import DEFAULT_PARAM_TYPES
from .inputs import FuzzInput, Request, unpack_types

EPSILON = 0.1
FRESH_MAX = 80
OUT_SIZE = 64


@dataclass
class CommandCoverage:
    """Per-command block sets and which of their blocks have been reached."""
    blocks: dict[int, frozenset[int]] = field(default_factory=dict)
    seen: set[int] = field(default_factory=set)
    version: int = 0                     # bumped whenever ``seen`` grows

    def uncovered(self, cmd: int) -> int:
        b = self.blocks.get(cmd, frozenset())
        return len(b - self.seen)

    def observe(self, targets):
        n = len(self.seen)
        self.seen.update(targets)
        if len(self.seen) != n:
            self.version += 1


class Scheduler:
    def __init__(self, model: StateModel | None, ids, epsilon: float = EPSILON,
                 coverage: CommandCoverage | None = None, stateful: bool = True):
        self.model = model if model is not None else StateModel()
        self.ids = sorted(set(ids) | set(self.model.prefixes))
        self.epsilon = epsilon
        self.coverage = coverage or CommandCoverage()
        self.stateful = stateful and not self.model.empty
        self._weights = (None, [])

    # ---- pieces ----
    def pick_target(self, rng: random.Random) -> int:
        if not self.ids:
            return rng.getrandbits(32)     # nothing recovered: probe blindly
        version, weights = self._weights
        if version != self.coverage.version:
            weights = [1 + self.coverage.uncovered(c) for c in self.ids]
            self._weights = (self.coverage.version, weights)
        return rng.choices(self.ids, weights)[0]

    def chain(self, target: int, rng: random.Random) -> list[int]:
        """A random legal ordering of ``target``'s prerequisites."""
        if not self.stateful:
            return []
        anc = set(self.model.chain(target))
        parents = self.model.parents
        out = []
        while anc:
            ready = sorted(c for c in anc if not (parents.get(c, frozenset()) & anc))
            c = rng.choice(ready)
            out.append(c)
            anc.discard(c)
        return out

    def violate(self, chain: list[int], target: int, rng: random.Random) -> list[int]:
        if not chain:
            return [target]
        k = rng.randrange(len(chain))
        rest = chain[:k] + chain[k + 1:]
        if rng.random() < 0.5:
            return rest + [target]               # prerequisite missing
        return rest + [target, chain[k]]         # prerequisite too late

    @staticmethod
    def fresh_request(cmd: int, rng: random.Random) -> Request:
        n = rng.randrange(FRESH_MAX + 1)
        data = rng.randbytes(n)
        return Request(cmd, unpack_types(DEFAULT_PARAM_TYPES), (data, bytes(OUT_SIZE), b"", b""))

    # ---- draw ----
    def schedule(self, corpus, rng: random.Random) -> FuzzInput:
        """``corpus`` holds payload parents: a sequence of FuzzInputs, or a mapping
        from final command to such a sequence."""
        target = self.pick_target(rng)
        chain = self.chain(target, rng)
        order = chain + [target]
        if self.stateful and self.epsilon > 0 and rng.random() < self.epsilon:
            order = self.violate(chain, target, rng)
        if hasattr(corpus, "get"):
            parents = corpus.get(target, ())
        else:
            parents = [p for p in corpus or () if p.sequence[-1].command == target]
        parent = rng.choice(parents) if parents and rng.random() < 0.5 else None
        donors = {}
        if parent is not None:
            for r in parent.sequence:
                donors[r.command] = r
        seq = []
        for c in order:
            r = donors.get(c)
            seq.append(r if r is not None else self.fresh_request(c, rng))
        return FuzzInput(tuple(seq), parent.seed_id if parent is not None else "")


def schedule(state_model: StateModel | None, corpus, rng: random.Random, ids=(),
             epsilon: float = EPSILON) -> FuzzInput:
    return Scheduler(state_model, ids, epsilon).schedule(corpus, rng)


__all__ = ["Scheduler", "CommandCoverage", "schedule", "EPSILON"]
