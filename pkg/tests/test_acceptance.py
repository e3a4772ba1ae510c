"""End-to-end checks for the eight headline criteria.

Each test records its outcome through ``criterion``; the summary hook in
conftest prints one PASS/FAIL line per criterion at the end of the run.
"""
import random
import time
from collections import Counter

import pytest

import test_corpusgen
import test_engine
import test_fuzzer
import test_loader
import test_rewriter
from conftest import CORPUS_SEED, built, criterion, load
from taforge.analysis import analyze, enumerate_command_ids, recover_cfg
from taforge.corpusgen import generate, random_corpus, random_spec
from taforge.fuzzer import (DIRECT_TRAP, REWRITTEN, Campaign, CampaignConfig, CoverageBitmap,
                            FuzzInput, Session, parse_crash, parse_stats, replay, request,
                            update_coverage)
from taforge.profiles import PROFILES
from taforge.tracecmp import Normalizer, compare

HOT = bytes([200]) * 300


def campaign_for(spec, g, config, mode=REWRITTEN):
    s = Session(g.elf, PROFILES[spec.profile], g.libs, mode=mode)
    an = analyze(s.image)
    return Campaign(s, an.ids.values, an.model, an.command_blocks(), config)


# ---- 1 ----

def test_c1_analyzer_exactness():
    with criterion(1, "command-id precision/recall over 20 TAs, HDCP ids, < 60 s") as c:
        t0 = time.perf_counter()
        corpus = [(s, generate(s)) for s in random_corpus(CORPUS_SEED, 20)]
        per_profile = Counter(s.profile for s, _ in corpus)
        assert len(corpus) == 20 and min(per_profile.values()) >= 5
        assert set(per_profile) == set(PROFILES)
        assert {s.dispatch for s, _ in corpus} == {"IF_ELSE_CHAIN", "JUMP_TABLE"}
        tp = fp = fn = 0
        for spec, g in corpus:
            assert g.manifest.decoy_values
            img = load(g, spec)
            got = enumerate_command_ids(recover_cfg(img), img.entrypoints["invoke"]).values
            want = set(g.manifest.command_ids)
            tp += len(got & want)
            fp += len(got - want)
            fn += len(want - got)
        spec, g = built(("hdcp", "TEEGRIS"))
        img = load(g, spec)
        hdcp_ids = enumerate_command_ids(recover_cfg(img), img.entrypoints["invoke"]).values
        elapsed = time.perf_counter() - t0
        precision, recall = tp / (tp + fp), tp / (tp + fn)
        c.detail = f"precision {precision:.3f} recall {recall:.3f} in {elapsed:.1f}s"
        assert precision == recall == 1.0
        assert hdcp_ids >= {202, 222, 230, 231, 251, 252}
        assert elapsed < 60


# ---- 2 ----

def _equivalence_fixtures():
    specs = [built(("hdcp", "TEEGRIS"))[0], built(("guarded", "OPTEE"))[0]]
    specs += random_corpus(2, 20)
    r = random.Random(5)
    specs += [random_spec(r, vuln=True) for _ in range(8)]
    out = []
    for spec in specs:
        g = generate(spec)
        p = PROFILES[spec.profile]
        rw = Session(g.elf, p, g.libs, mode=REWRITTEN)
        d = Session(g.elf, p, g.libs, mode=DIRECT_TRAP)
        triggers = [v.trigger for v in g.manifest.vulns]
        out.append((rw, d, Normalizer(rw.image, rw.table), Normalizer(d.image),
                    sorted(g.manifest.command_ids), triggers))
    return out


def _random_input(r, ids, triggers):
    if triggers and r.random() < 0.1:
        return FuzzInput(tuple(request(c, HOT) for c in r.choice(triggers)))
    seq = []
    for _ in range(r.randrange(1, 6)):
        cmd = r.choice(ids) if r.random() < 0.9 else r.getrandbits(32)
        data = HOT[:r.randrange(0, 300)] if r.random() < 0.2 else r.randbytes(r.randrange(0, 300))
        seq.append(request(cmd, data, out_size=r.choice((0, 16, 64, 256))))
    return FuzzInput(tuple(seq))


def test_c2_rewriter_equivalence():
    with criterion(2, "10,000 rewritten vs direct-trap runs agree exactly, < 10 min") as c:
        t0 = time.perf_counter()
        fixtures = _equivalence_fixtures()
        r = random.Random(2)
        mismatches = faults = 0
        for _ in range(10_000):
            rw, d, nrw, nd, ids, triggers = r.choice(fixtures)
            inp = _random_input(r, ids, triggers)
            a, b = rw.run(inp), d.run(inp)
            faults += a.fault is not None
            same = (rw.state_hash() == d.state_hash()
                    and rw.syscall_log() == d.syscall_log()
                    and set(nrw(a.events)) == set(nd(b.events))
                    and a.statuses == b.statuses)
            mismatches += not same
        elapsed = time.perf_counter() - t0
        c.detail = f"{mismatches} mismatches ({faults} faulting runs) in {elapsed:.0f}s"
        assert mismatches == 0
        assert faults > 0
        assert elapsed < 600


# ---- 3 ----

def test_c3_trace_fidelity():
    with criterion(3, "10k-iteration campaign replayed in direct-trap, bitmap jaccard >= 0.99") as c:
        spec, g = built(("hdcp", "TEEGRIS"))
        state = campaign_for(spec, g, CampaignConfig(iterations=10_000, seed=3,
                                                     record_inputs=True)).run()
        assert len(state.history) == 10_000
        d = Session(g.elf, PROFILES[spec.profile], g.libs, mode=DIRECT_TRAP)
        norm = Normalizer(d.image)
        replayed = CoverageBitmap()
        for inp in state.history:
            update_coverage(norm(d.run(inp).events), CoverageBitmap(), replayed)
        j = compare(state.global_bitmap, replayed).jaccard
        c.detail = f"jaccard {j:.6f}, occupancy {state.global_bitmap.occupancy()}"
        assert j >= 0.99


# ---- 4 ----

def _trials(stateful):
    spec, g = built(("guarded", "OPTEE"))
    found = []
    for seed in range(10):
        cfg = CampaignConfig(iterations=1_000_000, seed=seed, stateful=stateful, stop_on_crash=True)
        st = campaign_for(spec, g, cfg, mode=DIRECT_TRAP).run()
        v = g.manifest.vulns[0]
        hit = [k for k, cr in st.crashes.items()
               if (cr.fault.kind, cr.pc_offset) == (v.fault_kind, v.fault_offset)]
        found.append((bool(hit), st.stats.executions))
    return found


@pytest.mark.slow
def test_c4_stateful_effectiveness():
    with criterion(4, "guarded OOB_WRITE: stateful >= 9/10 within 1e6, baseline 0/10") as c:
        stateful = _trials(True)
        baseline = _trials(False)
        hits = sum(h for h, _ in stateful)
        base_hits = sum(h for h, _ in baseline)
        worst = max(n for h, n in stateful if h) if hits else None
        c.detail = (f"stateful {hits}/10 (max execs to crash {worst}), "
                    f"baseline {base_hits}/10 over {sum(n for _, n in baseline)} execs")
        assert hits >= 9
        assert base_hits == 0
        assert all(n == 1_000_000 for _, n in baseline)


# ---- 5 ----

def test_c5_throughput(tmp_path):
    with criterion(5, "60 s single-worker HDCP campaign, >= 100 requests/s") as c:
        spec, g = built(("hdcp", "TEEGRIS"))
        campaign_for(spec, g, CampaignConfig(seconds=60, seed=5, workers=1,
                                             out_dir=str(tmp_path))).run()
        stats = parse_stats((tmp_path / "stats.txt").read_text())
        rps = float(stats["requests_per_sec"])
        per_request = int(stats["instructions"]) / int(stats["requests"])
        c.detail = f"{rps:.0f} requests/s, {per_request:.0f} instructions/request"
        assert float(stats["elapsed_seconds"]) >= 60
        assert per_request <= 10_000
        assert rps >= 100


# ---- 6 ----

def test_c6_crash_replay_and_dedup(tmp_path):
    with criterion(6, "persisted crashes replay identically; distinct vulns never share a key") as c:
        r = random.Random(6)
        specs = [random_spec(r, vuln=True) for _ in range(20)] + [built(("guarded", "OPTEE"))[0]]
        owner = {}
        replayed = 0
        for i, spec in enumerate(specs):
            g = generate(spec)
            (v,) = g.manifest.vulns
            out = tmp_path / f"ta{i}"
            cfg = CampaignConfig(iterations=20_000, seed=i, stop_on_crash=True, out_dir=str(out))
            campaign_for(spec, g, cfg).run()
            files = sorted((out / "crashes").glob("*.bin"))
            if not files:
                # not found within budget: persist the known trigger instead
                s = Session(g.elf, PROFILES[spec.profile], g.libs)
                rep = replay(s, FuzzInput(tuple(request(x, HOT) for x in v.trigger)),
                             Normalizer(s.image, s.table))
                (out / "crashes").mkdir(parents=True, exist_ok=True)
                p = out / "crashes" / f"{rep.dedup_key}.bin"
                p.write_bytes(rep.to_bytes())
                files = [p]
            for p in files:
                stored = parse_crash(p.read_bytes())
                assert p.stem == stored.dedup_key
                for mode in (REWRITTEN, DIRECT_TRAP):
                    s = Session(g.elf, PROFILES[spec.profile], g.libs, mode=mode)
                    again = replay(s, stored.input, Normalizer(s.image, s.table))
                    assert again is not None
                    assert (again.fault.kind, again.pc_offset, again.dedup_key) == \
                        (stored.kind, stored.pc_offset, stored.dedup_key)
                    replayed += 1
                if (stored.kind, stored.pc_offset) == (v.fault_kind, v.fault_offset):
                    assert owner.setdefault(stored.dedup_key, i) == i
        c.detail = f"{replayed} replays, {len(owner)} keys over {len(specs)} planted vulns"
        assert len(owner) >= len(specs)


# ---- 7 ----

def test_c7_determinism(tmp_path):
    with criterion(7, "identical single-worker campaigns give identical bitmap.bin and executions") as c:
        spec, g = built(("hdcp", "TEEGRIS"))
        outs = []
        for k in range(2):
            d = tmp_path / f"run{k}"
            campaign_for(spec, g, CampaignConfig(iterations=10_000, seed=77, workers=1,
                                                 out_dir=str(d))).run()
            outs.append(d)
        a, b = ((d / "bitmap.bin").read_bytes() for d in outs)
        ea, eb = (parse_stats((d / "stats.txt").read_text())["executions"] for d in outs)
        c.detail = f"executions {ea}/{eb}, bitmaps {'identical' if a == b else 'differ'}"
        assert a == b and ea == eb == "10000"


# ---- 8 ----

def test_c8_invariant_suites():
    with criterion(8, "loader, rewriter, engine, fuzzer and corpusgen property suites") as c:
        suites = [test_loader.test_regions_disjoint_and_w32_confined,
                  test_rewriter.test_patch_minimality,
                  test_engine.test_snapshot_round_trip_identity,
                  test_fuzzer.test_coverage_is_monotone,
                  test_fuzzer.test_campaign_coverage_is_monotone,
                  test_fuzzer.test_reset_soundness,
                  test_corpusgen.test_manifest_fidelity_property]
        for prop in suites:
            prop()
        c.detail = f"{len(suites)} suites green"

