"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 input error, 3 the run found (or
reproduced) a crash.  Data goes to stdout, diagnostics to stderr; verbosity
follows ``TAFORGE_LOG`` (error, info or debug).
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from . import analysis as an
from . import corpusgen as cg
from .engine import write_trace
from .errors import ConfigError, SpecInvalid, TaforgeError
from .fuzzer import Campaign, CampaignConfig, Session, parse_crash, replay
from .fuzzer.campaign import parse_stats
from .fuzzer.coverage import CoverageBitmap
from .fuzzer.harness import MODES, REWRITTEN
from .loader import format_layout, load_ta
from .profiles import resolve_profile
from .syscalls import DeviceModel, load_device_script
from .tracecmp import (NormalizedTrace, Normalizer, bitmap_of, compare, heatmap, load_comparable,
                       summary)

EXIT_OK, EXIT_USAGE, EXIT_INPUT, EXIT_CRASH = 0, 1, 2, 3
LOG_LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}

log = logging.getLogger("taforge")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


FIXTURES = {
    "hdcp": lambda: cg.hdcp_spec(),
    "guarded": lambda: cg.guarded_overflow_spec(),
}


# ---------------------------------------------------------------------------
# shared loading
# ---------------------------------------------------------------------------

def _read(path: str) -> bytes:
    with open(path, "rb") as f:
        return f.read()


def _load(args):
    profile, layout = resolve_profile(args.profile)
    return load_ta(_read(args.ta), profile, layout, args.libs)


def _devices(args) -> DeviceModel:
    if getattr(args, "devices", None):
        return load_device_script(args.devices)
    return DeviceModel(strict=False)


def _session(args) -> Session:
    profile, layout = resolve_profile(args.profile)
    return Session(_read(args.ta), profile, args.libs, mode=args.mode,
                   devices=_devices(args), layout=layout)


def _read_commands(path: Path) -> list[int]:
    ids = []
    for n, line in enumerate(path.read_text().splitlines(), 1):
        t = line.split("#", 1)[0].split()
        if not t:
            continue
        try:
            ids.append(int(t[0], 0))
        except ValueError:
            raise SpecInvalid(f"{path}:{n}: bad command id {t[0]!r}") from None
    return ids


def _format_commands(a: an.Analysis) -> str:
    base = a.image.image_base
    lines = [f"{c.value} handler {c.handler - base:#x}" for c in sorted(a.ids.ids)]
    return "".join(line + "\n" for line in lines)


def _format_complexity(a: an.Analysis) -> str:
    s, c = a.branches.summary
    base = a.image.image_base
    lines = [f"conditional {len(a.branches.labels)}", f"simple {s:.6f}", f"complex {c:.6f}"]
    lines += [f"branch {pc - base:#x} {label}" for pc, label in sorted(a.branches.by_branch().items())]
    return "".join(line + "\n" for line in lines)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_gen(args) -> int:
    if os.path.isfile(args.spec):
        spec = cg.parse_spec(Path(args.spec).read_text())
    elif args.spec in FIXTURES:
        spec = FIXTURES[args.spec]()
    else:
        raise ConfigError(f"no spec file or built-in fixture named {args.spec!r}")
    g = cg.generate(spec)
    out = Path(args.out)
    (out / "libs").mkdir(parents=True, exist_ok=True)
    (out / "ta.elf").write_bytes(g.elf)
    for name, blob in g.stubs:
        (out / "libs" / name).write_bytes(blob)
    (out / "manifest.txt").write_text(cg.format_manifest(g.manifest))
    (out / "spec.txt").write_text(cg.format_spec(spec))
    print(f"ta {out / 'ta.elf'}")
    print(f"profile {spec.profile}")
    print(f"libs {out / 'libs'}")
    print(f"commands {' '.join(str(c) for c in sorted(g.manifest.commands))}")
    return EXIT_OK


def cmd_load(args) -> int:
    sys.stdout.write(format_layout(_load(args)))
    return EXIT_OK


def cmd_analyze(args) -> int:
    a = an.analyze(_load(args))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report = an.format_report(a)
    (out / "report.txt").write_text(report)
    (out / "commands.txt").write_text(_format_commands(a))
    (out / "state_model.txt").write_text(an.format_state_model(a.model))
    (out / "complexity.txt").write_text(_format_complexity(a))
    sys.stdout.write(report)
    return EXIT_OK


def cmd_fuzz(args) -> int:
    if args.iterations is None and args.seconds is None:
        raise UsageError("fuzz: one of --iterations or --seconds is required")
    adir = Path(args.analysis)
    ids = _read_commands(adir / "commands.txt")
    model = an.parse_state_model((adir / "state_model.txt").read_text())
    session = _session(args)
    blocks = an.analyze(session.image).command_blocks()
    cfg = CampaignConfig(iterations=args.iterations, seconds=args.seconds, seed=args.seed,
                         workers=args.workers, out_dir=args.out,
                         stateful=not args.no_state_model,
                         checkpoint_every=args.checkpoint_every)
    factory = (lambda: _session(args)) if args.workers > 1 else None
    build = Campaign.resume if args.resume else Campaign
    c = build(session, ids, model, blocks, cfg, factory)
    state = c.run()
    sys.stdout.write(c.stats_text())
    for key, crash in sorted(state.crashes.items()):
        print(f"crash {key} {crash.fault_line()}")
    return EXIT_CRASH if state.crashes else EXIT_OK


def cmd_replay(args) -> int:
    stored = parse_crash(_read(args.crash))
    session = _session(args)
    normalize = Normalizer(session.image, session.table)
    res = session.run(stored.input)
    if args.trace:
        write_trace(args.trace, res.events, binary=args.binary)
    report = replay(session, stored.input, normalize)
    if report is None:
        print("no fault")
        return EXIT_OK
    print(report.fault_line())
    same = (report.fault.kind, report.pc_offset, report.dedup_key) == \
        (stored.kind, stored.pc_offset, stored.dedup_key)
    print(f"matches_stored {'yes' if same else 'no'}")
    if not same:
        log.error("replayed fault differs from the stored report (key %s)", stored.dedup_key)
    return EXIT_CRASH


def cmd_compare(args) -> int:
    a, b = load_comparable(args.a), load_comparable(args.b)
    res = compare(a, b)
    print(f"jaccard {res.jaccard:.6f}")
    print(f"only_a {len(res.only_a)}")
    print(f"only_b {len(res.only_b)}")
    if args.heatmap:
        bm = bitmap_of(a) if isinstance(a, NormalizedTrace) else a
        sys.stdout.write(heatmap(bm, args.heatmap))
    return EXIT_OK


def cmd_report(args) -> int:
    d = Path(args.campaign)
    try:
        text = (d / "stats.txt").read_text()
    except OSError as e:
        raise ConfigError(f"not a campaign directory: {e}") from None
    stats = parse_stats(text)
    sys.stdout.write(text)
    bm = d / "bitmap.bin"
    if bm.is_file():
        sys.stdout.write(summary(CoverageBitmap(bm.read_bytes())))
    crashes = sorted((d / "crashes").glob("*.bin")) if (d / "crashes").is_dir() else []
    for p in crashes:
        sc = parse_crash(p.read_bytes())
        acc = "-" if sc.access is None else f"{sc.access:#x}"
        cmds = " ".join(str(c) for c in sc.input.commands)
        print(f"crash {sc.dedup_key} {sc.kind} pc {sc.pc_offset:#x} access {acc} commands {cmds}")
    if "execs_per_sec" not in stats:
        log.error("stats.txt has no execs_per_sec line")
        return EXIT_INPUT
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def _positive(v: str) -> int:
    n = int(v, 0)
    if n < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return n


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="taforge", description="Rehost, analyze and fuzz trusted applications.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def ta_flags(sp, libs=True):
        sp.add_argument("--ta", required=True, help="TA ELF file")
        sp.add_argument("--profile", required=True, help="OPTEE, TEEGRIS, TRUSTY, QSEE or a config file")
        if libs:
            sp.add_argument("--libs", help="directory holding the TA's shared libraries")

    def run_flags(sp):
        sp.add_argument("--mode", choices=MODES, default=REWRITTEN)
        sp.add_argument("--devices", help="device script file")

    g = sub.add_parser("gen", help="generate a synthetic TA with its manifest")
    g.add_argument("--spec", required=True, help="spec file, or one of: " + ", ".join(FIXTURES))
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen)

    ld = sub.add_parser("load", help="print the loaded memory layout")
    ta_flags(ld)
    ld.set_defaults(func=cmd_load)

    a = sub.add_parser("analyze", help="recover commands, dependencies and the state model")
    ta_flags(a)
    a.add_argument("--out", required=True)
    a.set_defaults(func=cmd_analyze)

    f = sub.add_parser("fuzz", help="run a fuzzing campaign")
    ta_flags(f)
    f.add_argument("--analysis", required=True, help="directory written by analyze")
    f.add_argument("--out", required=True)
    bound = f.add_mutually_exclusive_group()
    bound.add_argument("--iterations", type=_positive)
    bound.add_argument("--seconds", type=float)
    f.add_argument("--workers", type=_positive, default=1)
    f.add_argument("--seed", type=lambda v: int(v, 0), default=0)
    f.add_argument("--checkpoint-every", type=int, default=1000)
    f.add_argument("--no-state-model", action="store_true",
                   help="schedule single commands only (baseline)")
    f.add_argument("--resume", action="store_true", help="continue from the last checkpoint in --out")
    run_flags(f)
    f.set_defaults(func=cmd_fuzz)

    r = sub.add_parser("replay", help="re-run a crash file and print its fault")
    r.add_argument("--crash", required=True)
    ta_flags(r)
    run_flags(r)
    r.add_argument("--trace", help="also write the raw branch trace here")
    r.add_argument("--binary", action="store_true", help="binary trace records")
    r.set_defaults(func=cmd_replay)

    c = sub.add_parser("compare", help="Jaccard similarity of two bitmaps or traces")
    c.add_argument("--a", required=True)
    c.add_argument("--b", required=True)
    c.add_argument("--heatmap", help="write the first input's bitmap as a PGM image")
    c.set_defaults(func=cmd_compare)

    rp = sub.add_parser("report", help="summarize a campaign directory")
    rp.add_argument("--campaign", required=True)
    rp.set_defaults(func=cmd_report)
    return p


class _StderrHandler(logging.StreamHandler):
    """Writes to whatever ``sys.stderr`` is at emit time, so a swapped or
    closed earlier stream is never touched."""

    @property
    def stream(self):
        return sys.stderr

    @stream.setter
    def stream(self, _):
        pass


def _setup_logging() -> None:
    level = os.environ.get("TAFORGE_LOG", "error").lower()
    if level not in LOG_LEVELS:
        raise UsageError(f"TAFORGE_LOG must be one of {', '.join(LOG_LEVELS)}")
    root = logging.getLogger("taforge")
    root.setLevel(LOG_LEVELS[level])
    if not any(isinstance(h, _StderrHandler) for h in root.handlers):
        h = _StderrHandler()
        h.setFormatter(logging.Formatter("taforge: %(levelname)s %(message)s"))
        root.addHandler(h)


def main(argv=None) -> int:
    try:
        _setup_logging()
        args = build_parser().parse_args(argv)
        return args.func(args)
    except UsageError as e:
        print(str(e), file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as e:              # --help
        return EXIT_OK if not e.code else EXIT_USAGE
    except (TaforgeError, OSError, ValueError) as e:
        print(f"taforge: error: {e}", file=sys.stderr)
        return EXIT_INPUT


__all__ = ["main", "build_parser", "EXIT_OK", "EXIT_USAGE", "EXIT_INPUT", "EXIT_CRASH"]
