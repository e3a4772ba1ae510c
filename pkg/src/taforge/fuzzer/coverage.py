"""Edge-coverage bitmap with saturating counters and 8-level hit classes."""

from __future__ import annotations

from collections import Counter
from typing import Iterable

MAP_SIZE = 65536
MUL_SRC, MUL_DST = 0x9E3779B1, 0x85EBCA77


def edge_hash(source: int, target: int) -> int:
    return (((source >> 2) * MUL_SRC) ^ ((target >> 2) * MUL_DST)) % MAP_SIZE


def _class_of(n: int) -> int:
    if n <= 3:
        return n
    for cls, hi in ((4, 7), (5, 15), (6, 31), (7, 127)):
        if n <= hi:
            return cls
    return 8


HIT_CLASS = bytes(_class_of(n) for n in range(256))


def hit_class(count: int) -> int:
    """0 for no hits, then 1, 2, 3, 4-7, 8-15, 16-31, 32-127, 128-255 -> 1..8."""
    return HIT_CLASS[min(count, 255)]


class CoverageBitmap:
    __slots__ = ("buckets",)

    def __init__(self, data: bytes | None = None):
        if data is not None and len(data) != MAP_SIZE:
            raise ValueError(f"bitmap must be {MAP_SIZE} bytes, got {len(data)}")
        self.buckets = bytearray(data) if data is not None else bytearray(MAP_SIZE)

    def clear(self):
        self.buckets[:] = bytes(MAP_SIZE)

    def add(self, bucket: int, n: int = 1):
        self.buckets[bucket] = min(255, self.buckets[bucket] + n)

    def occupied(self) -> list[int]:
        return [i for i, v in enumerate(self.buckets) if v]

    def occupancy(self) -> int:
        return MAP_SIZE - self.buckets.count(0)

    def classes(self) -> bytes:
        return bytes(self.buckets).translate(HIT_CLASS)

    def to_bytes(self) -> bytes:
        return bytes(self.buckets)

    def copy(self) -> "CoverageBitmap":
        return CoverageBitmap(bytes(self.buckets))

    def __eq__(self, other):
        return isinstance(other, CoverageBitmap) and self.buckets == other.buckets


_hash_cache: dict[tuple[int, int], int] = {}


def bucket_counts(edges: Iterable[tuple]) -> Counter:
    """bucket -> hit count for a sequence of (source, target[, kind]) edges."""
    cache = _hash_cache
    out: Counter = Counter()
    for e in edges:
        key = (e[0], e[1])
        b = cache.get(key)
        if b is None:
            b = cache[key] = edge_hash(*key)
        out[b] += 1
    return out


def update_coverage(trace, local: CoverageBitmap, global_map: CoverageBitmap) -> bool:
    """Count ``trace`` into ``local``; fold into ``global_map`` when it adds a hit class.

    ``trace`` is a BranchTrace or any iterable of (source, target[, kind]).
    """
    events = getattr(trace, "events", trace)
    counts = bucket_counts(events)
    lb, gb = local.buckets, global_map.buckets
    for b, n in counts.items():
        lb[b] = min(255, lb[b] + n)
    interesting = False
    for b in counts:
        if HIT_CLASS[lb[b]] > HIT_CLASS[gb[b]]:
            interesting = True
            break
    if interesting:
        for b in counts:
            if lb[b] > gb[b]:
                gb[b] = lb[b]
    return interesting


__all__ = ["MAP_SIZE", "edge_hash", "hit_class", "HIT_CLASS", "CoverageBitmap", "bucket_counts",
           "update_coverage"]
