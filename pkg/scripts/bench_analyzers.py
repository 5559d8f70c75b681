#!/usr/bin/env python3
"""Time every registered analyzer against a generated slide.

Useful when touching the analysis code path: prints wall time and output
summary per analyzer so regressions stand out before they reach a queue
full of real tasks.
"""

import argparse
import random
import sys
import tempfile
import time
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "tests"))

from tiffgen import build_tiff  # noqa: E402

from pimip import slide_io  # noqa: E402
from pimip.analysis import built_in_registry, run_analyzer  # noqa: E402

from make_demo_slide import halve, tissue_image  # noqa: E402


def summarize(result: dict) -> str:
    kind = result["kind"]
    if kind == "mask":
        return f"mask area={result['mask'].area} bounds={result['mask'].bounds}"
    if kind == "points":
        return f"{len(result['points'])} points"
    grid = result["grid"]
    return f"grid {grid.rows}x{grid.cols} classes={sorted(grid.stats)}"


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--width", type=int, default=2400)
    parser.add_argument("--height", type=int, default=1800)
    parser.add_argument("--seed", type=int, default=3)
    args = parser.parse_args()

    rng = random.Random(args.seed)
    base = tissue_image(rng, args.width, args.height)
    levels = [base]
    while max(levels[-1].shape[:2]) > 256:
        levels.append(halve(levels[-1]))

    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "bench.tif"
        path.write_bytes(build_tiff(levels, tile=(256, 256),
                                    description="b|AppMag = 40|MPP = 0.25"))
        registry = built_in_registry()
        overrides = {
            "region_grow": {"x": args.width // 2, "y": args.height // 2},
            "nucleus_detect": {"w": 1024, "h": 1024},
        }
        for descriptor in registry.list():
            reader = slide_io.open_slide(path)
            try:
                t0 = time.monotonic()
                result = run_analyzer(reader, descriptor,
                                      overrides.get(descriptor.name, {}))
                dt = time.monotonic() - t0
            finally:
                reader.close()
            print(f"{descriptor.name:18s} {dt * 1000:8.1f}ms  {summarize(result)}")


if __name__ == "__main__":
    main()
