#!/usr/bin/env python3
"""Mutation-fuzz the TIFF parser and report the error-code distribution.

Builds a small valid slide in memory, then repeatedly corrupts random
bytes (and sometimes truncates) before running the full parse-validate-
decode path. Any exception that is not a structured platform error is a
bug and stops the run with a traceback.
"""

import argparse
import random
import sys
import time
from collections import Counter
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "tests"))

from tiffgen import build_tiff, gradient_image  # noqa: E402

from pimip.errors import PimipError  # noqa: E402
from pimip.slide_io import tiff  # noqa: E402


def run_once(data: bytes) -> str:
    header = tiff.parse_header(data)
    chain = tiff.walk_ifd_chain(data, header.first_ifd_offset)
    decoded = 0
    for directory in chain:
        if not directory.is_tiled:
            continue
        image = tiff.validate_tiled_directory(directory)
        tiff.decode_tile(image, data, 0, 0)
        decoded += 1
    return f"parsed:{decoded}"


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--iterations", type=int, default=10000)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--max-edits", type=int, default=12)
    args = parser.parse_args()

    base = build_tiff(
        [gradient_image(96, 64, channels=3, seed=8),
         gradient_image(48, 32, channels=3, seed=9)],
        tile=(32, 32), description="f|AppMag = 40|MPP = 0.25",
    )
    rng = random.Random(args.seed)
    outcomes = Counter()
    slowest = 0.0
    started = time.monotonic()
    for _ in range(args.iterations):
        buf = bytearray(base)
        if rng.random() < 0.15:
            buf = buf[:rng.randint(0, len(buf))]
        for _ in range(rng.randint(1, args.max_edits)):
            if buf:
                buf[rng.randrange(len(buf))] = rng.randrange(256)
        t0 = time.monotonic()
        try:
            outcomes[run_once(bytes(buf))] += 1
        except PimipError as exc:
            outcomes[exc.code] += 1
        slowest = max(slowest, time.monotonic() - t0)
    elapsed = time.monotonic() - started

    for code, count in outcomes.most_common():
        print(f"{count:7d}  {code}")
    print(f"# {args.iterations} inputs in {elapsed:.1f}s, "
          f"slowest single input {slowest * 1000:.1f}ms")


if __name__ == "__main__":
    main()
