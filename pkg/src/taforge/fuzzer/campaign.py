"""The fuzzing loop: schedule, mutate, run from the snapshot, fold coverage,
triage crashes, checkpoint.

Persistence directory::

    corpus/<seed_id>.bin      interesting inputs (encoded FuzzInput)
    crashes/<dedup_key>.bin   input + fault record
    stats.txt                 key value lines
    bitmap.bin                65536 raw global counters
    checkpoint.json           rng state and bookkeeping for resume

With one worker a campaign is a pure function of (image, analysis, config):
two runs with the same seed produce the same bitmap, corpus and stats
counters.  Extra workers run in threads, each with its own session and rng
stream, and only meet at the global bitmap and corpus under a lock.
"""

from __future__ import annotations

import json
import logging
import os
import random
import threading
import time
from dataclasses import dataclass, field
from typing import Callable

from ..engine import Fault
from ..errors import TaforgeError
from ..tracecmp import Normalizer
from .coverage import MAP_SIZE, CoverageBitmap, bucket_counts, update_coverage
from .harness import Session
from .inputs import MAX_PAYLOAD, FuzzInput, decode_input, encode_input
from .mutate import Mutator
from .schedule import EPSILON, CommandCoverage, Scheduler
from .triage import TRACE_TAIL, CrashReport, build_report, parse_crash

log = logging.getLogger(__name__)


class CampaignIOError(TaforgeError):
    code = "CAMPAIGN_IO"


@dataclass
class CampaignConfig:
    iterations: int | None = None
    seconds: float | None = None
    seed: int = 0
    epsilon: float = EPSILON
    stateful: bool = True                 # False: single-command scheduling, no sequence growth
    reset_between_sequences: bool = True
    checkpoint_every: int = 1000
    out_dir: str | None = None
    max_payload: int = MAX_PAYLOAD
    trace_tail: int = TRACE_TAIL
    workers: int = 1
    record_inputs: bool = False           # keep every executed input (replay experiments)
    stop_on_crash: bool = False

    def __post_init__(self):
        if self.iterations is None and self.seconds is None:
            raise ValueError("campaign needs an iteration or time bound")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")


@dataclass
class Stats:
    executions: int = 0
    requests: int = 0
    instructions: int = 0
    unique_crashes: int = 0
    corpus_size: int = 0
    bitmap_occupancy: int = 0
    elapsed: float = 0.0

    @property
    def iterations(self) -> int:
        return self.executions

    @property
    def execs_per_sec(self) -> float:
        return self.executions / self.elapsed if self.elapsed > 0 else 0.0

    @property
    def requests_per_sec(self) -> float:
        return self.requests / self.elapsed if self.elapsed > 0 else 0.0

    def format(self, extra: dict | None = None) -> str:
        rows = [("executions", self.executions), ("iterations", self.iterations),
                ("requests", self.requests), ("instructions", self.instructions),
                ("execs_per_sec", f"{self.execs_per_sec:.2f}"),
                ("requests_per_sec", f"{self.requests_per_sec:.2f}"),
                ("unique_crashes", self.unique_crashes), ("corpus_size", self.corpus_size),
                ("bitmap_occupancy", self.bitmap_occupancy),
                ("elapsed_seconds", f"{self.elapsed:.3f}")]
        rows += list((extra or {}).items())
        return "".join(f"{k} {v}\n" for k, v in rows)


def parse_stats(text: str) -> dict[str, str]:
    out = {}
    for line in text.splitlines():
        if line.strip():
            k, _, v = line.partition(" ")
            out[k] = v.strip()
    return out


@dataclass
class CorpusEntry:
    input: FuzzInput
    seed_id: str
    buckets: frozenset[int]


@dataclass
class CampaignState:
    corpus: list[CorpusEntry] = field(default_factory=list)
    global_bitmap: CoverageBitmap = field(default_factory=CoverageBitmap)
    stats: Stats = field(default_factory=Stats)
    rng_seed: int = 0
    crashes: dict[str, CrashReport] = field(default_factory=dict)
    history: list[FuzzInput] = field(default_factory=list)


@dataclass
class CaseResult:
    interesting: bool
    crash: CrashReport | None
    statuses: list
    edges: list[tuple[int, int]]


class _Worker:
    def __init__(self, campaign: "Campaign", session: Session, rng: random.Random):
        self.c = campaign
        self.session = session
        self.rng = rng
        self.normalize = Normalizer(session.image, session.table)
        cfg = campaign.config
        self.mutator = Mutator(campaign.ids, cfg.max_payload, allow_sequences=cfg.stateful)

    def run_case(self, inp: FuzzInput) -> CaseResult:
        c = self.c
        res = self.session.run(inp, reset=c.config.reset_between_sequences)
        edges = self.normalize(res.events)
        local = CoverageBitmap()
        with c.lock:
            interesting = update_coverage(edges, local, c.state.global_bitmap)
        crash = None
        fault = res.fault
        if fault is not None:
            cmd = inp.sequence[len(res.statuses) - 1].command
            crash = build_report(inp, fault, edges, self.session.image.image_base, cmd,
                                 c.config.trace_tail)
        st = c.state.stats
        with c.lock:
            st.executions += 1
            st.requests += len(res.statuses)
            st.instructions += res.instructions
        return CaseResult(interesting, crash, res.statuses, edges)

    def step(self):
        c = self.c
        inp = c.scheduler.schedule(c.parents, self.rng)
        inp = self.mutator.mutate(inp, self.rng)
        if c.config.record_inputs:
            c.state.history.append(inp)
        r = self.run_case(inp)
        with c.lock:
            if r.interesting:
                c.add_to_corpus(inp, r.edges)
            if r.crash is not None and r.crash.dedup_key not in c.state.crashes:
                c.add_crash(r.crash)
        return r


class Campaign:
    def __init__(self, session: Session, ids, model=None, command_blocks=None,
                 config: CampaignConfig | None = None,
                 session_factory: Callable[[], Session] | None = None):
        self.config = config or CampaignConfig(iterations=1000)
        self.session = session
        self.session_factory = session_factory
        self.ids = sorted(set(ids))
        base = session.image.image_base
        blocks = {c: frozenset(b - base for b in bs) for c, bs in (command_blocks or {}).items()}
        self.coverage = CommandCoverage(blocks)
        self.scheduler = Scheduler(model, self.ids, self.config.epsilon, self.coverage,
                                   stateful=self.config.stateful)
        self.lock = threading.RLock()
        self.state = CampaignState(rng_seed=self.config.seed)
        self.rng = random.Random(self.config.seed)
        self.parents: dict[int, list[FuzzInput]] = {}     # corpus inputs by final command
        self._next_id = 0
        self._elapsed_before = 0.0
        if self.config.out_dir:
            self._prepare_dirs()

    @classmethod
    def from_analysis(cls, session: Session, analysis, config: CampaignConfig | None = None,
                      session_factory=None) -> "Campaign":
        return cls(session, analysis.ids.values, analysis.model, analysis.command_blocks(),
                   config, session_factory)

    # ---- bookkeeping ----
    def add_to_corpus(self, inp: FuzzInput, edges):
        sid = f"id{self._next_id:06d}-{inp.digest()}"
        self._next_id += 1
        inp = FuzzInput(inp.sequence, sid)
        self.state.corpus.append(CorpusEntry(inp, sid, frozenset(bucket_counts(edges))))
        self.parents.setdefault(inp.sequence[-1].command, []).append(inp)
        self.coverage.observe(t for _, t in edges)
        if self.config.out_dir:
            self._write(os.path.join(self.config.out_dir, "corpus", sid + ".bin"), encode_input(inp))

    def add_crash(self, crash: CrashReport):
        self.state.crashes[crash.dedup_key] = crash
        log.info("new crash %s: %s", crash.dedup_key, crash.fault_line())
        if self.config.out_dir:
            self._write(os.path.join(self.config.out_dir, "crashes", crash.dedup_key + ".bin"),
                        crash.to_bytes())

    def _done(self, t0: float) -> bool:
        cfg = self.config
        if cfg.iterations is not None and self.state.stats.executions >= cfg.iterations:
            return True
        if cfg.seconds is not None and time.perf_counter() - t0 >= cfg.seconds:
            return True
        return cfg.stop_on_crash and bool(self.state.crashes)

    # ---- main loop ----
    def run(self) -> CampaignState:
        cfg = self.config
        t0 = time.perf_counter()
        try:
            if cfg.workers == 1:
                w = _Worker(self, self.session, self.rng)
                while not self._done(t0):
                    w.step()
                    self._tick(t0)
            else:
                self._run_threads(t0)
        except KeyboardInterrupt:
            log.warning("interrupted; writing final checkpoint")
        self._tick(t0, force=True)
        return self.state

    def _run_threads(self, t0: float):
        if self.session_factory is None:
            raise ValueError("multiple workers need a session_factory")
        workers = [_Worker(self, self.session, self.rng)]
        for i in range(1, self.config.workers):
            workers.append(_Worker(self, self.session_factory(),
                                   random.Random(f"{self.config.seed}/{i}")))

        def loop(w):
            while True:
                with self.lock:
                    if self._done(t0):
                        return
                w.step()
                self._tick(t0)
        threads = [threading.Thread(target=loop, args=(w,), daemon=True) for w in workers]
        for t in threads:
            t.start()
        for t in threads:
            t.join()

    def _tick(self, t0: float, force: bool = False):
        st = self.state.stats
        with self.lock:
            st.elapsed = self._elapsed_before + time.perf_counter() - t0
            st.unique_crashes = len(self.state.crashes)
            st.corpus_size = len(self.state.corpus)
            every = self.config.checkpoint_every
            if self.config.out_dir and (force or (every and st.executions % every == 0)):
                st.bitmap_occupancy = self.state.global_bitmap.occupancy()
                self.checkpoint()
        if force:
            st.bitmap_occupancy = self.state.global_bitmap.occupancy()

    # ---- persistence ----
    def _prepare_dirs(self):
        try:
            for sub in ("corpus", "crashes"):
                os.makedirs(os.path.join(self.config.out_dir, sub), exist_ok=True)
        except OSError as e:
            raise CampaignIOError(f"cannot create campaign directory: {e}") from None

    def _write(self, path: str, data, mode: str = "wb"):
        tmp = path + ".tmp"
        try:
            with open(tmp, mode) as f:
                f.write(data)
            os.replace(tmp, path)
        except OSError as e:
            raise CampaignIOError(f"cannot write {path}: {e}") from None

    def stats_text(self) -> str:
        return self.state.stats.format({"mode": self.session.mode, "seed": self.config.seed,
                                        "workers": self.config.workers})

    def checkpoint(self):
        d = self.config.out_dir
        st = self.state.stats
        st.bitmap_occupancy = self.state.global_bitmap.occupancy()
        self._write(os.path.join(d, "bitmap.bin"), self.state.global_bitmap.to_bytes())
        self._write(os.path.join(d, "stats.txt"), self.stats_text(), "w")
        version, internal, gauss = self.rng.getstate()
        ck = {"executions": st.executions, "requests": st.requests,
              "instructions": st.instructions, "elapsed": st.elapsed,
              "next_id": self._next_id, "seed": self.config.seed,
              "rng": [version, list(internal), gauss],
              "corpus": [e.seed_id for e in self.state.corpus],
              "crashes": sorted(self.state.crashes),
              "seen": sorted(self.coverage.seen)}
        self._write(os.path.join(d, "checkpoint.json"), json.dumps(ck), "w")

    @classmethod
    def resume(cls, session: Session, ids, model, command_blocks, config: CampaignConfig,
               session_factory=None) -> "Campaign":
        """Continue a campaign from ``config.out_dir``'s last checkpoint."""
        c = cls(session, ids, model, command_blocks, config, session_factory)
        d = config.out_dir
        try:
            with open(os.path.join(d, "checkpoint.json")) as f:
                ck = json.load(f)
            with open(os.path.join(d, "bitmap.bin"), "rb") as f:
                c.state.global_bitmap = CoverageBitmap(f.read())
            normalize = Normalizer(session.image, session.table)
            for sid in ck["corpus"]:
                with open(os.path.join(d, "corpus", sid + ".bin"), "rb") as f:
                    inp, _ = decode_input(f.read(), sid)
                res = session.run(inp)
                sig = frozenset(bucket_counts(normalize(res.events)))
                c.state.corpus.append(CorpusEntry(inp, sid, sig))
                c.parents.setdefault(inp.sequence[-1].command, []).append(inp)
            for key in ck["crashes"]:
                with open(os.path.join(d, "crashes", key + ".bin"), "rb") as f:
                    sc = parse_crash(f.read())
                fault = Fault(sc.kind, session.image.image_base + sc.pc_offset, sc.access)
                c.state.crashes[key] = CrashReport(sc.input, fault, key, sc.pc_offset)
        except (OSError, ValueError, KeyError) as e:
            raise CampaignIOError(f"cannot resume from {d}: {e}") from None
        version, internal, gauss = ck["rng"]
        c.rng.setstate((version, tuple(internal), gauss))
        st = c.state.stats
        st.executions, st.requests = ck["executions"], ck["requests"]
        st.instructions, c._elapsed_before = ck["instructions"], ck["elapsed"]
        c._next_id = ck["next_id"]
        c.coverage.seen = set(ck["seen"])
        return c


def campaign(session: Session, analysis, config: CampaignConfig) -> CampaignState:
    """Build and run a campaign from an :class:`~taforge.analysis.Analysis`."""
    return Campaign.from_analysis(session, analysis, config).run()


__all__ = ["CampaignConfig", "Campaign", "CampaignState", "CaseResult", "CorpusEntry", "Stats",
           "CampaignIOError", "campaign", "parse_stats", "MAP_SIZE"]
