"""Write a randomized TA corpus plus the two named fixtures to a directory.

    python scripts/gen_corpus.py --out corpus --seed 11 --count 20
"""
import argparse
from pathlib import Path

from taforge.corpusgen import (format_manifest, format_spec, generate, guarded_overflow_spec,
                               hdcp_spec, random_corpus)


def write(spec, out: Path) -> None:
    g = generate(spec)
    (out / "libs").mkdir(parents=True, exist_ok=True)
    (out / "ta.elf").write_bytes(g.elf)
    (out / "spec.txt").write_text(format_spec(spec))
    (out / "manifest.txt").write_text(format_manifest(g.manifest))
    for name, blob in g.libs.items():
        (out / "libs" / name).write_bytes(blob)


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", type=Path, required=True)
    ap.add_argument("--seed", type=int, default=11)
    ap.add_argument("--count", type=int, default=20)
    args = ap.parse_args()
    write(hdcp_spec(), args.out / "hdcp")
    write(guarded_overflow_spec(), args.out / "guarded")
    for i, spec in enumerate(random_corpus(args.seed, args.count)):
        write(spec, args.out / f"ta{i:02d}_{spec.profile.lower()}")
    print(f"wrote {args.count + 2} fixtures under {args.out}")


if __name__ == "__main__":
    main()
