"""One-call analysis of a loaded TA and its text report."""

from __future__ import annotations

from dataclasses import dataclass

from ..loader import LoadedImage
from .cfg import ANALYSIS_INCOMPLETE, Cfg, recover_cfg
from .commands import CommandIdSet, arm_blocks, enumerate_command_ids
from .complexity import BranchComplexity, classify_branches
from .deps import DependencyGraph, analyze_dependencies
from .state_model import StateModel, build_state_model, format_state_model


@dataclass
class Analysis:
    image: LoadedImage
    cfg: Cfg
    ids: CommandIdSet
    deps: DependencyGraph
    branches: BranchComplexity          # restricted to the TA object itself
    model: StateModel

    def command_blocks(self) -> dict[int, set[int]]:
        """Command -> its private arm blocks plus the TA functions only it reaches."""
        cfg = self.cfg
        ta = self.image.objects[0]
        reach: dict[int, set[int]] = {}
        arms = arm_blocks(cfg, self.ids)
        for cmd, blocks in arms.items():
            todo = [cfg.calls.get(b) for b in blocks]
            seen: set[int] = set()
            while todo:
                f = todo.pop()
                if f is None or f in seen or f not in cfg.functions or not ta.lo <= f < ta.hi:
                    continue
                seen.add(f)
                todo += [cfg.calls.get(b) for b in cfg.functions[f]]
            reach[cmd] = seen
        shared = {f for cmd in reach for f in reach[cmd]
                  if sum(f in r for r in reach.values()) > 1}
        out = {}
        for cmd, blocks in arms.items():
            out[cmd] = set(blocks).union(*(cfg.functions[f] for f in reach[cmd] - shared))
        return out


def analyze(image: LoadedImage) -> Analysis:
    cfg = recover_cfg(image)
    ids = enumerate_command_ids(cfg, image.entrypoints["invoke"])
    deps = analyze_dependencies(cfg, ids)
    ta = image.objects[0]
    branches = classify_branches(cfg).restricted(ta.lo, ta.hi)
    return Analysis(image, cfg, ids, deps, branches, build_state_model(deps))


def format_report(an: Analysis) -> str:
    base = an.image.image_base
    out = [f"# analysis of {an.image.objects[0].name} ({an.image.profile.name}, "
           f"{an.image.word_width}-bit, base {base:#x})", ""]
    incomplete = sum(1 for b in an.cfg.blocks.values() if ANALYSIS_INCOMPLETE in b.annotations)
    out += ["[cfg]", f"blocks {len(an.cfg.blocks)}", f"edges {len(an.cfg.edges)}",
            f"functions {len(an.cfg.functions)}", f"incomplete {incomplete}", ""]
    out.append("[commands]")
    for c in sorted(an.ids.ids):
        out.append(f"command {c.value} ({c.value:#x}) handler {c.handler:#x} site {c.site:#x}")
    dh = an.ids.default_handler
    out += [f"default {dh:#x}" if dh is not None else "default -", ""]
    out.append("[dependencies]")
    for a, b, k in sorted(an.deps.edges):
        out.append(f"edge {a} -> {b} {k}")
    if an.deps.context_object:
        addr, size = an.deps.context_object
        out.append(f"context {addr:#x} size {size}")
    for f in an.deps.context_fields:
        w = ",".join(map(str, sorted(f.writers))) or "-"
        r = ",".join(map(str, sorted(f.readers))) or "-"
        out.append(f"field +{f.offset:#x} width {f.width} writers {w} readers {r}")
    out.append("")
    s, c = an.branches.summary
    out += ["[branches]", f"conditional {len(an.branches.labels)} simple {s:.3f} complex {c:.3f}", ""]
    out.append("[state-model]")
    out.append(format_state_model(an.model).rstrip("\n"))
    return "\n".join(out) + "\n"


__all__ = ["Analysis", "analyze", "format_report"]
