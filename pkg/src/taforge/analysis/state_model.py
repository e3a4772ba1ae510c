"""Prerequisite chains per command, derived from the dependency graph.

A command's chain is the set of its ancestors laid out in dependency order.
Where the order between ancestors is free, :meth:`StateModel.orderings`
enumerates every legal interleaving; :meth:`StateModel.chain` returns the
canonical one (smallest ready id first).  Exported as lines of
``cmd <id>: prereqs <id list>``.
"""

from __future__ import annotations

import graphlib
import heapq
from dataclasses import dataclass, field
from typing import Iterator

from ..errors import CycleDetected, SpecInvalid
from .deps import DependencyGraph


@dataclass
class StateModel:
    prefixes: dict[int, tuple[int, ...]] = field(default_factory=dict)
    parents: dict[int, frozenset[int]] = field(default_factory=dict)   # direct prereqs

    @property
    def commands(self) -> list[int]:
        return sorted(self.prefixes)

    @property
    def empty(self) -> bool:
        return not any(self.prefixes.values())

    def chain(self, cmd: int) -> tuple[int, ...]:
        return self.prefixes.get(cmd, ())

    def orderings(self, cmd: int, limit: int = 10_000) -> Iterator[tuple[int, ...]]:
        """Every topological order of ``cmd``'s ancestors (up to ``limit``)."""
        anc = set(self.chain(cmd))
        count = 0

        def rec(placed: tuple[int, ...], left: frozenset[int]):
            nonlocal count
            if count >= limit:
                return
            if not left:
                count += 1
                yield placed
                return
            for c in sorted(left):
                if not (self.parents.get(c, frozenset()) & left):
                    yield from rec(placed + (c,), left - {c})
        yield from rec((), frozenset(anc))

    def legal(self, sequence) -> bool:
        """True when every command appears after all of its direct prereqs."""
        seen: set[int] = set()
        for c in sequence:
            if not self.parents.get(c, frozenset()) <= seen:
                return False
            seen.add(c)
        return True


def _parents(graph: DependencyGraph) -> dict[int, set[int]]:
    parents: dict[int, set[int]] = {n: set() for n in graph.nodes}
    for a, b, _ in graph.edges:
        parents.setdefault(b, set()).add(a)
        parents.setdefault(a, set())
    return parents


def build_state_model(graph: DependencyGraph) -> StateModel:
    parents = _parents(graph)
    try:
        order = list(graphlib.TopologicalSorter(parents).static_order())
    except graphlib.CycleError as e:
        raise CycleDetected(f"dependency cycle through {e.args[1]}") from None
    ancestors: dict[int, set[int]] = {}
    for c in order:
        anc = set()
        for p in parents[c]:
            anc |= {p} | ancestors[p]
        ancestors[c] = anc
    model = StateModel(parents={c: frozenset(p) for c, p in parents.items()})
    for c in sorted(parents):
        model.prefixes[c] = _canonical(ancestors[c], parents)
    return model


def _canonical(anc: set[int], parents) -> tuple[int, ...]:
    waiting = {a: set(parents[a] & anc) for a in anc}
    ready = [a for a, p in waiting.items() if not p]
    heapq.heapify(ready)
    out = []
    while ready:
        c = heapq.heappop(ready)
        out.append(c)
        for a, p in waiting.items():
            if c in p:
                p.discard(c)
                if not p:
                    heapq.heappush(ready, a)
    return tuple(out)


def format_state_model(model: StateModel) -> str:
    lines = []
    for c in model.commands:
        pre = model.chain(c)
        lines.append(f"cmd {c}: prereqs {' '.join(map(str, pre)) if pre else '-'}")
    return "\n".join(lines) + "\n"


def parse_state_model(text: str) -> StateModel:
    """Inverse of :func:`format_state_model`; direct prereqs are rebuilt as
    chain-order constraints, which is what the scheduler needs."""
    model = StateModel()
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        try:
            head, tail = line.split(":", 1)
            kw, cid = head.split()
            kw2, *ids = tail.split()
            if kw != "cmd" or kw2 != "prereqs":
                raise ValueError
            cmd = int(cid, 0)
            pre = () if ids == ["-"] else tuple(int(x, 0) for x in ids)
        except ValueError:
            raise SpecInvalid(f"state model line {n}: expected 'cmd <id>: prereqs <ids>'") from None
        model.prefixes[cmd] = pre
        for p in pre:
            model.prefixes.setdefault(p, ())
    for c, pre in model.prefixes.items():
        model.parents[c] = frozenset(pre)
    return model


__all__ = ["StateModel", "build_state_model", "format_state_model", "parse_state_model"]
