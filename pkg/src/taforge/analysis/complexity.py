"""Simple/complex labelling of conditional branches.

A conditional block is COMPLEX when an operand of its comparison was derived
from a load through a non-stack pointer, and SIMPLE when the operands come
from immediates, parameters or values round-tripped through the stack.  The
``mem`` bit of the abstract values carries exactly that distinction.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .absint import FLAGS, analyze_function, entry_state, replay_block
from .cfg import COND, Cfg

SIMPLE, COMPLEX = "SIMPLE", "COMPLEX"


@dataclass
class BranchComplexity:
    labels: dict[int, str] = field(default_factory=dict)     # COND block start -> label
    branch_pc: dict[int, int] = field(default_factory=dict)  # COND block start -> branch address

    @property
    def summary(self) -> tuple[float, float]:
        n = len(self.labels)
        if not n:
            return 0.0, 0.0
        s = sum(1 for v in self.labels.values() if v == SIMPLE)
        return s / n, (n - s) / n

    def by_branch(self) -> dict[int, str]:
        return {self.branch_pc[b]: lab for b, lab in self.labels.items()}

    def restricted(self, lo: int, hi: int) -> "BranchComplexity":
        """Only the branches whose address lies in [lo, hi)."""
        keep = {b for b, pc in self.branch_pc.items() if lo <= pc < hi}
        return BranchComplexity({b: self.labels[b] for b in keep},
                                {b: self.branch_pc[b] for b in keep})


def _operand_from_memory(pre, ins) -> bool:
    if ins.op in ("cbz", "cbnz"):
        return ins.rd != 31 and pre.get(ins.rd).mem
    return pre.get(FLAGS).mem


def classify_branches(cfg: Cfg) -> BranchComplexity:
    out = BranchComplexity()
    width = cfg.image.word_width
    for entry in sorted(cfg.functions):
        blocks = [b for b in cfg.functions[entry] if cfg.blocks[b].term == COND and b not in out.labels]
        if not blocks:
            continue
        states = analyze_function(cfg, entry, entry_state(), width)
        for b in blocks:
            blk = cfg.blocks[b]
            seen = {}

            def grab(pc, ins, st, last=blk.last_pc):
                if pc == last:
                    seen["pre"] = st.copy()
            st = states.get(b)
            complex_ = False
            if st is not None:
                replay_block(cfg, b, st, width, on_insn=grab)
                complex_ = _operand_from_memory(seen["pre"], blk.last)
            out.labels[b] = COMPLEX if complex_ else SIMPLE
            out.branch_pc[b] = blk.last_pc
    return out


__all__ = ["SIMPLE", "COMPLEX", "BranchComplexity", "classify_branches"]
