"""Trace normalization, trace/bitmap comparison and bitmap heatmaps.

Normalized traces are offsets from the image base with the rewriter's
detours folded back: ``site -> trampoline`` becomes ``site -> site+4`` (what a
direct trap records) and everything executed inside the trampoline region
is dropped.  That makes rewritten-mode and direct-trap traces comparable.
"""

from __future__ import annotations

import io
from dataclasses import dataclass
from typing import Iterable

from .engine import BranchTrace, read_trace
from .errors import ForeignTrace, KindMismatch
from .fuzzer.coverage import MAP_SIZE, CoverageBitmap, bucket_counts
from .loader import LoadedImage
from .rewriter import TrampolineTable

REWRITTEN, DIRECT_TRAP, EXTERNAL = "REWRITTEN", "DIRECT_TRAP", "EXTERNAL"
GRID = 256


@dataclass(frozen=True)
class NormalizedTrace:
    events: tuple[tuple[int, int], ...]      # ordered (source, target) offsets, repeats kept
    origin: str = EXTERNAL

    @property
    def edges(self) -> frozenset[tuple[int, int]]:
        return frozenset(self.events)


@dataclass(frozen=True)
class Comparison:
    jaccard: float
    only_a: frozenset
    only_b: frozenset


def _events(trace) -> list[tuple]:
    if isinstance(trace, BranchTrace):
        return trace.events
    return list(trace)


def _tramp_info(table: TrampolineTable | None):
    if table is None or table.region is None:
        return None
    return table.region.base, table.region.end, table.by_trampoline


def fold_events(events: Iterable[tuple], base: int, lo: int, hi: int,
                tramp: tuple[int, int, dict] | None = None) -> tuple[list[tuple[int, int]], int]:
    """The normalization loop: (kept offset edges, count of events wholly outside [lo, hi))."""
    out = []
    append = out.append
    foreign = 0
    tlo, thi, by_tramp = tramp if tramp is not None else (0, 0, {})
    for ev in events:
        s, t = ev[0], ev[1]
        if tlo <= s < thi:
            continue                    # inside the trampoline, or its branch back
        if tlo <= t < thi:
            if by_tramp.get(t) == s:
                append((s - base, s + 4 - base))
            continue
        s_in, t_in = lo <= s < hi, lo <= t < hi
        if s_in and t_in:
            append((s - base, t - base))
        elif not s_in and not t_in:
            foreign += 1
    return out, foreign


def normalize(trace, image: LoadedImage, table: TrampolineTable | None = None,
              origin: str | None = None) -> NormalizedTrace:
    """Offsets relative to ``image.image_base``; trampoline round trips collapsed."""
    if isinstance(trace, NormalizedTrace):
        return trace
    events = _events(trace)
    lo, hi = image.extent
    out, foreign = fold_events(events, image.image_base, lo, hi, _tramp_info(table))
    if events and foreign * 2 > len(events):
        raise ForeignTrace(f"{foreign} of {len(events)} events fall outside the image extent")
    if origin is None:
        origin = REWRITTEN if table is not None else DIRECT_TRAP
    return NormalizedTrace(tuple(out), origin)


class Normalizer:
    """normalize() bound to one image and table, for per-run use in the fuzzer."""

    def __init__(self, image: LoadedImage, table: TrampolineTable | None = None):
        self.base = image.image_base
        self.lo, self.hi = image.extent
        self.tramp = _tramp_info(table)

    def __call__(self, events) -> list[tuple[int, int]]:
        return fold_events(events, self.base, self.lo, self.hi, self.tramp)[0]


def bitmap_of(trace) -> CoverageBitmap:
    """Bitmap from a normalized trace (or any (source, target) sequence)."""
    events = trace.events if isinstance(trace, NormalizedTrace) else _events(trace)
    bm = CoverageBitmap()
    for b, n in bucket_counts(events).items():
        bm.add(b, n)
    return bm


def _keys(x):
    if isinstance(x, CoverageBitmap):
        return "bitmap", frozenset(x.occupied())
    if isinstance(x, NormalizedTrace):
        return "trace", x.edges
    raise KindMismatch(f"cannot compare {type(x).__name__}")


def compare(a, b) -> Comparison:
    ka, sa = _keys(a)
    kb, sb = _keys(b)
    if ka != kb:
        raise KindMismatch(f"cannot compare a {ka} with a {kb}")
    union = sa | sb
    j = len(sa & sb) / len(union) if union else 1.0
    return Comparison(j, frozenset(sa - sb), frozenset(sb - sa))


def summary(bitmap: CoverageBitmap) -> str:
    classes = bitmap.classes()
    occ = bitmap.occupancy()
    return (f"occupancy {occ / MAP_SIZE:.6f} ({occ} of {MAP_SIZE} buckets)\n"
            f"max_hit_class {max(classes)}\n")


def heatmap(bitmap: CoverageBitmap, out) -> str:
    """Write a 256x256 P2 graymap (intensity = hit class, 0..8) and return the summary.

    ``out`` is a path or a text stream.
    """
    classes = bitmap.classes()
    buf = io.StringIO()
    buf.write(f"P2\n# bucket k at column k % {GRID}, row k // {GRID}\n{GRID} {GRID}\n8\n")
    for row in range(GRID):
        buf.write(" ".join(str(c) for c in classes[row * GRID:(row + 1) * GRID]))
        buf.write("\n")
    text = buf.getvalue()
    if hasattr(out, "write"):
        out.write(text)
    else:
        with open(out, "w") as f:
            f.write(text)
    return summary(bitmap)


def read_pgm(text: str) -> list[list[int]]:
    """Pixel rows of a P2 graymap (comments allowed)."""
    toks = []
    for line in text.splitlines():
        toks += line.split("#", 1)[0].split()
    if not toks or toks[0] != "P2":
        raise ValueError("not a P2 graymap")
    w, h = int(toks[1]), int(toks[2])
    px = [int(v) for v in toks[4:4 + w * h]]
    return [px[r * w:(r + 1) * w] for r in range(h)]


def load_comparable(path) -> CoverageBitmap | NormalizedTrace:
    """A raw 65536-byte file is a bitmap; anything else is read as a trace file."""
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) == MAP_SIZE:
        return CoverageBitmap(blob)
    events = read_trace(path)
    return NormalizedTrace(tuple((s, t) for s, t, _ in events), EXTERNAL)


__all__ = ["REWRITTEN", "DIRECT_TRAP", "EXTERNAL", "NormalizedTrace", "Comparison", "normalize",
           "fold_events", "Normalizer", "bitmap_of", "compare", "heatmap", "summary", "read_pgm",
           "load_comparable"]
