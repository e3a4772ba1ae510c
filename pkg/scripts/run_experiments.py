"""Measure throughput, stateful search cost and mode agreement on the fixtures.

Prints one line per measurement. Smaller budgets than the test suite by default;
pass --full for the 10^6-execution search budget.
"""
import argparse
import time

from taforge.analysis import analyze
from taforge.corpusgen import generate, guarded_overflow_spec, hdcp_spec
from taforge.fuzzer import (DIRECT_TRAP, REWRITTEN, Campaign, CampaignConfig, CoverageBitmap,
                            Session, update_coverage)
from taforge.profiles import PROFILES
from taforge.tracecmp import Normalizer, compare


def campaign(spec, g, mode=REWRITTEN, **cfg):
    s = Session(g.elf, PROFILES[spec.profile], g.libs, mode=mode)
    an = analyze(s.image)
    return Campaign(s, an.ids.values, an.model, an.command_blocks(), CampaignConfig(**cfg))


def throughput(seconds: float) -> None:
    spec = hdcp_spec()
    g = generate(spec)
    st = campaign(spec, g, seconds=seconds, seed=1).run().stats
    print(f"throughput requests_per_sec {st.requests_per_sec:.1f} "
          f"execs_per_sec {st.execs_per_sec:.1f} "
          f"instructions_per_request {st.instructions / max(st.requests, 1):.0f}")


def stateful_search(trials: int, budget: int) -> None:
    spec = guarded_overflow_spec()
    g = generate(spec)
    for stateful in (True, False):
        found, execs = 0, []
        for seed in range(trials):
            st = campaign(spec, g, DIRECT_TRAP, iterations=budget, seed=seed,
                          stateful=stateful, stop_on_crash=True).run()
            found += bool(st.crashes)
            execs.append(st.stats.executions)
        label = "stateful" if stateful else "single-command"
        print(f"search {label} found {found}/{trials} budget {budget} "
              f"median_execs {sorted(execs)[len(execs) // 2]}")


def trace_fidelity(iterations: int) -> None:
    spec = hdcp_spec()
    g = generate(spec)
    state = campaign(spec, g, iterations=iterations, seed=3, record_inputs=True).run()
    d = Session(g.elf, PROFILES[spec.profile], g.libs, mode=DIRECT_TRAP)
    norm = Normalizer(d.image)
    replayed = CoverageBitmap()
    for inp in state.history:
        update_coverage(norm(d.run(inp).events), CoverageBitmap(), replayed)
    print(f"fidelity iterations {iterations} "
          f"jaccard {compare(state.global_bitmap, replayed).jaccard:.6f}")


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seconds", type=float, default=10.0)
    ap.add_argument("--trials", type=int, default=10)
    ap.add_argument("--full", action="store_true")
    args = ap.parse_args()
    t0 = time.perf_counter()
    throughput(args.seconds)
    trace_fidelity(10_000)
    stateful_search(args.trials, 1_000_000 if args.full else 20_000)
    print(f"total_seconds {time.perf_counter() - t0:.0f}")


if __name__ == "__main__":
    main()
